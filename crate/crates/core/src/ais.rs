//! AIS parsing and the preprocessing pipeline: filter, segment, resample,
//! length enforcement, windowing, min-max normalisation and persistence.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geo::{angle_diff_deg, normalize_deg, point_segment_distance_nm, GeoPoint, KinematicState};

/// Variables per time step, in storage order.
pub const N_VARS: usize = 4;
pub const VAR_NAMES: [&str; N_VARS] = ["lat", "lon", "sog", "cog"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NavStatus {
    Underway,
    Moored,
    Anchored,
    Other,
    Unknown,
}

impl NavStatus {
    /// Maps textual or numeric (ITU code) status fields.
    pub fn parse(raw: &str) -> Self {
        let s = raw.trim().to_ascii_lowercase();
        match s.as_str() {
            "" | "unknown" | "unknown value" | "undefined" | "15" => return NavStatus::Unknown,
            "0" | "8" => return NavStatus::Underway,
            "1" => return NavStatus::Anchored,
            "5" => return NavStatus::Moored,
            _ => {}
        }
        if s.contains("moored") {
            NavStatus::Moored
        } else if s.contains("anchor") {
            NavStatus::Anchored
        } else if s.contains("under way") || s.contains("underway") {
            NavStatus::Underway
        } else {
            NavStatus::Other
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AisRecord {
    /// Seconds since the Unix epoch.
    pub timestamp: f64,
    pub mmsi: u64,
    pub state: KinematicState,
    pub nav_status: NavStatus,
}

impl AisRecord {
    pub fn row(&self) -> [f64; N_VARS] {
        [
            self.state.position.lat(),
            self.state.position.lon(),
            self.state.sog(),
            self.state.cog(),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TimeFormat {
    EpochSeconds,
    EpochMillis,
    /// chrono format string, interpreted as UTC.
    DateTime(String),
}

/// Mapping from record roles to CSV header names.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnMap {
    pub timestamp: String,
    pub mmsi: String,
    pub lat: String,
    pub lon: String,
    pub sog: String,
    pub cog: String,
    pub nav_status: Option<String>,
    pub time_format: TimeFormat,
}

impl ColumnMap {
    pub fn piraeus() -> Self {
        Self {
            timestamp: "t".into(),
            mmsi: "vessel_id".into(),
            lat: "lat".into(),
            lon: "lon".into(),
            sog: "speed".into(),
            cog: "course".into(),
            nav_status: None,
            time_format: TimeFormat::EpochMillis,
        }
    }

    pub fn dma() -> Self {
        Self {
            timestamp: "# Timestamp".into(),
            mmsi: "MMSI".into(),
            lat: "Latitude".into(),
            lon: "Longitude".into(),
            sog: "SOG".into(),
            cog: "COG".into(),
            nav_status: Some("Navigational status".into()),
            time_format: TimeFormat::DateTime("%d/%m/%Y %H:%M:%S".into()),
        }
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "piraeus" => Some(Self::piraeus()),
            "dma" => Some(Self::dma()),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct ParseOutcome {
    pub records: Vec<AisRecord>,
    pub skipped: usize,
}

/// Stable positive identifier for non-numeric vessel ids.
pub fn vessel_key(raw: &str) -> Option<u64> {
    let raw = raw.trim();
    if raw.is_empty() {
        return None;
    }
    if let Ok(v) = raw.parse::<u64>() {
        return (v > 0).then_some(v);
    }
    let digest = Sha256::digest(raw.as_bytes());
    let v = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes")) & (u64::MAX >> 1);
    Some(v.max(1))
}

fn parse_time(raw: &str, fmt: &TimeFormat) -> Option<f64> {
    let raw = raw.trim();
    let t = match fmt {
        TimeFormat::EpochSeconds => raw.parse::<f64>().ok()?,
        TimeFormat::EpochMillis => raw.parse::<f64>().ok()? / 1000.0,
        TimeFormat::DateTime(f) => {
            chrono::NaiveDateTime::parse_from_str(raw, f)
                .ok()?
                .and_utc()
                .timestamp() as f64
        }
    };
    t.is_finite().then_some(t)
}

/// Reads AIS rows. Rows with unparseable or out-of-range fields are counted
/// and skipped.
pub fn parse_ais_csv<R: Read>(source: R, columns: &ColumnMap) -> Result<ParseOutcome> {
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_reader(source);
    let headers = reader.headers()?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let it = find(&columns.timestamp)?;
    let im = find(&columns.mmsi)?;
    let ilat = find(&columns.lat)?;
    let ilon = find(&columns.lon)?;
    let isog = find(&columns.sog)?;
    let icog = find(&columns.cog)?;
    let inav = columns.nav_status.as_deref().map(find).transpose()?;

    let mut out = ParseOutcome::default();
    for row in reader.records() {
        let Ok(row) = row else {
            out.skipped += 1;
            continue;
        };
        let num = |i: usize| row.get(i).and_then(|s| s.trim().parse::<f64>().ok());
        let parsed = (|| {
            let timestamp = parse_time(row.get(it)?, &columns.time_format)?;
            let mmsi = vessel_key(row.get(im)?)?;
            let position = GeoPoint::new(num(ilat)?, num(ilon)?).ok()?;
            let state = KinematicState::new(position, num(isog)?, num(icog)?).ok()?;
            let nav_status = inav
                .and_then(|i| row.get(i))
                .map_or(NavStatus::Unknown, NavStatus::parse);
            Some(AisRecord {
                timestamp,
                mmsi,
                state,
                nav_status,
            })
        })();
        match parsed {
            Some(r) => out.records.push(r),
            None => out.skipped += 1,
        }
    }
    if out.records.is_empty() {
        return Err(Error::EmptyInput {
            skipped: out.skipped,
        });
    }
    Ok(out)
}

/// Reads a coastline file: `lon lat` vertex lines, polylines separated by blank lines.
pub fn parse_coastline(text: &str) -> Result<Vec<Vec<GeoPoint>>> {
    let mut lines = Vec::new();
    let mut current = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            if !current.is_empty() {
                lines.push(std::mem::take(&mut current));
            }
            continue;
        }
        let mut parts = line.split_whitespace().map(str::parse::<f64>);
        match (parts.next(), parts.next()) {
            (Some(Ok(lon)), Some(Ok(lat))) => current.push(GeoPoint::new(lat, lon)?),
            _ => return Err(Error::Format(format!("coastline line {}: `{line}`", n + 1))),
        }
    }
    if !current.is_empty() {
        lines.push(current);
    }
    Ok(lines)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum MaxVoyage {
    /// Overlapping chunks of `len` points advancing by `stride`.
    SlidingPoints { len: usize, stride: usize },
    /// Consecutive chunks spanning at most this many minutes.
    ChunkMinutes(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineProfile {
    pub name: String,
    pub max_sog: f64,
    pub coast_margin: f64,
    pub gap_split: f64,
    pub resample_interval: f64,
    /// Raw messages a segment needs before resampling.
    pub min_messages: usize,
    pub min_points: usize,
    pub min_duration: f64,
    pub max_voyage: MaxVoyage,
    pub window_in: usize,
    pub window_out: usize,
}

impl PipelineProfile {
    pub fn piraeus() -> Self {
        Self {
            name: "piraeus".into(),
            max_sog: 30.0,
            coast_margin: 1.0,
            gap_split: 30.0,
            resample_interval: 1.0,
            min_messages: 2,
            min_points: 42,
            min_duration: 0.0,
            max_voyage: MaxVoyage::SlidingPoints { len: 150, stride: 108 },
            window_in: 18,
            window_out: 24,
        }
    }

    pub fn dma() -> Self {
        Self {
            name: "dma".into(),
            gap_split: 120.0,
            resample_interval: 10.0,
            min_messages: 20,
            min_duration: 240.0,
            max_voyage: MaxVoyage::ChunkMinutes(1200.0),
            ..Self::piraeus()
        }
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "piraeus" => Some(Self::piraeus()),
            "dma" => Some(Self::dma()),
            _ => None,
        }
    }

    pub fn window_len(&self) -> usize {
        self.window_in + self.window_out
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [self.max_sog, self.gap_split, self.resample_interval];
        if positive.iter().any(|v| !(*v > 0.0)) || self.window_in == 0 || self.window_out == 0 {
            return Err(Error::Config(format!("profile `{}` has a non-positive field", self.name)));
        }
        if self.window_len() > self.min_points {
            return Err(Error::Config(format!(
                "window_in + window_out = {} exceeds min_points = {}",
                self.window_len(),
                self.min_points
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterCounts {
    pub speed: usize,
    pub status: usize,
    pub coast: usize,
}

/// Drops implausible speeds, moored/anchored reports and, when a coastline is
/// given, points within `coast_margin` of it. Survivors keep their order.
pub fn filter_records(
    records: Vec<AisRecord>,
    profile: &PipelineProfile,
    coastline: Option<&[Vec<GeoPoint>]>,
) -> (Vec<AisRecord>, FilterCounts) {
    let mut counts = FilterCounts::default();
    let near_coast = |p: GeoPoint| {
        coastline.is_some_and(|lines| {
            lines.iter().any(|line| match line.len() {
                0 => false,
                1 => point_segment_distance_nm(p, line[0], line[0]) < profile.coast_margin,
                _ => line
                    .windows(2)
                    .any(|s| point_segment_distance_nm(p, s[0], s[1]) < profile.coast_margin),
            })
        })
    };
    let kept = records
        .into_iter()
        .filter(|r| {
            if r.state.sog() > profile.max_sog {
                counts.speed += 1;
                false
            } else if matches!(r.nav_status, NavStatus::Moored | NavStatus::Anchored) {
                counts.status += 1;
                false
            } else if near_coast(r.state.position) {
                counts.coast += 1;
                false
            } else {
                true
            }
        })
        .collect();
    (kept, counts)
}

/// Time-ordered records of one vessel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VoyageSegment {
    pub mmsi: u64,
    pub records: Vec<AisRecord>,
}

impl VoyageSegment {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn duration_minutes(&self) -> f64 {
        match (self.records.first(), self.records.last()) {
            (Some(a), Some(b)) => (b.timestamp - a.timestamp) / 60.0,
            _ => 0.0,
        }
    }
}

/// Groups by vessel and starts a new segment whenever consecutive reports are
/// more than `gap_split` minutes apart. Repeated timestamps keep the first report.
pub fn segment_voyages(mut records: Vec<AisRecord>, profile: &PipelineProfile) -> Vec<VoyageSegment> {
    records.sort_by(|a, b| a.mmsi.cmp(&b.mmsi).then(a.timestamp.total_cmp(&b.timestamp)));
    let gap = profile.gap_split * 60.0;
    let mut out: Vec<VoyageSegment> = Vec::new();
    for r in records {
        match out.last_mut() {
            Some(seg) if seg.mmsi == r.mmsi => {
                let last = seg.records.last().expect("segments are never empty").timestamp;
                if r.timestamp == last {
                    continue;
                }
                if r.timestamp - last > gap {
                    out.push(VoyageSegment {
                        mmsi: r.mmsi,
                        records: vec![r],
                    });
                } else {
                    seg.records.push(r);
                }
            }
            _ => out.push(VoyageSegment {
                mmsi: r.mmsi,
                records: vec![r],
            }),
        }
    }
    out
}

fn lerp(a: f64, b: f64, f: f64) -> f64 {
    a + (b - a) * f
}

/// Interpolates a segment onto a uniform grid from `ceil(start)` to
/// `floor(end)`. Course follows the shorter arc.
pub fn resample_linear(segment: &VoyageSegment, profile: &PipelineProfile) -> Result<VoyageSegment> {
    let recs = &segment.records;
    if recs.len() < 2 {
        return Err(Error::TooShort(recs.len()));
    }
    let step = profile.resample_interval * 60.0;
    let first = (recs[0].timestamp / step).ceil() as i64;
    let last = (recs[recs.len() - 1].timestamp / step).floor() as i64;
    let mut out = Vec::with_capacity((last - first + 1).max(0) as usize);
    let mut i = 0;
    for k in first..=last {
        let t = k as f64 * step;
        while i + 2 < recs.len() && recs[i + 1].timestamp < t {
            i += 1;
        }
        let (a, b) = (&recs[i], &recs[i + 1]);
        let f = ((t - a.timestamp) / (b.timestamp - a.timestamp)).clamp(0.0, 1.0);
        let (pa, pb) = (a.state.position, b.state.position);
        let lat = lerp(pa.lat(), pb.lat(), f);
        let lon = pa.lon() + angle_diff_deg(pa.lon(), pb.lon()) * f;
        let lon = if lon > 180.0 { lon - 360.0 } else if lon < -180.0 { lon + 360.0 } else { lon };
        let sog = lerp(a.state.sog(), b.state.sog(), f);
        let cog = normalize_deg(a.state.cog() + angle_diff_deg(a.state.cog(), b.state.cog()) * f);
        out.push(AisRecord {
            timestamp: t,
            mmsi: segment.mmsi,
            state: KinematicState::new(GeoPoint::new(lat, lon)?, sog, cog)?,
            nav_status: if f < 1.0 { a.nav_status } else { b.nav_status },
        });
    }
    Ok(VoyageSegment {
        mmsi: segment.mmsi,
        records: out,
    })
}

fn long_enough(seg: &VoyageSegment, profile: &PipelineProfile) -> bool {
    seg.len() >= profile.min_points && seg.duration_minutes() >= profile.min_duration
}

/// Start indices of the overlapping chunks covering `n` points.
pub fn sliding_chunk_starts(n: usize, len: usize, stride: usize) -> Vec<usize> {
    let mut starts = vec![0];
    while starts.last().expect("non-empty") + len < n {
        starts.push(starts.last().expect("non-empty") + stride);
    }
    starts
}

/// Splits long segments according to the profile, then drops anything shorter
/// than `min_points` points or `min_duration` minutes.
pub fn enforce_length_and_split(segments: Vec<VoyageSegment>, profile: &PipelineProfile) -> Vec<VoyageSegment> {
    let mut out = Vec::new();
    for seg in segments {
        if !long_enough(&seg, profile) {
            continue;
        }
        let pieces: Vec<VoyageSegment> = match profile.max_voyage {
            MaxVoyage::SlidingPoints { len, stride } if seg.len() > len => {
                sliding_chunk_starts(seg.len(), len, stride)
                    .into_iter()
                    .map(|s| VoyageSegment {
                        mmsi: seg.mmsi,
                        records: seg.records[s..(s + len).min(seg.len())].to_vec(),
                    })
                    .collect()
            }
            MaxVoyage::ChunkMinutes(max) if seg.duration_minutes() > max => {
                let per = (max / profile.resample_interval).floor() as usize + 1;
                seg.records
                    .chunks(per)
                    .map(|c| VoyageSegment {
                        mmsi: seg.mmsi,
                        records: c.to_vec(),
                    })
                    .collect()
            }
            _ => vec![seg],
        };
        out.extend(pieces.into_iter().filter(|p| long_enough(p, profile)));
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub min: [f64; N_VARS],
    pub max: [f64; N_VARS],
}

impl NormalizationStats {
    pub fn apply(&self, row: &[f64; N_VARS]) -> [f64; N_VARS] {
        std::array::from_fn(|v| (row[v] - self.min[v]) / (self.max[v] - self.min[v]))
    }

    pub fn invert(&self, row: &[f64; N_VARS]) -> [f64; N_VARS] {
        std::array::from_fn(|v| row[v] * (self.max[v] - self.min[v]) + self.min[v])
    }

    pub fn apply_rows(&self, rows: &[[f64; N_VARS]]) -> Vec<[f64; N_VARS]> {
        rows.iter().map(|r| self.apply(r)).collect()
    }

    pub fn invert_rows(&self, rows: &[[f64; N_VARS]]) -> Vec<[f64; N_VARS]> {
        rows.iter().map(|r| self.invert(r)).collect()
    }
}

pub fn fit_minmax<'a>(rows: impl IntoIterator<Item = &'a [f64; N_VARS]>) -> Result<NormalizationStats> {
    let mut min = [f64::INFINITY; N_VARS];
    let mut max = [f64::NEG_INFINITY; N_VARS];
    for r in rows {
        for v in 0..N_VARS {
            min[v] = min[v].min(r[v]);
            max[v] = max[v].max(r[v]);
        }
    }
    for v in 0..N_VARS {
        if !(max[v] > min[v]) {
            return Err(Error::DegenerateVariable(VAR_NAMES[v]));
        }
    }
    Ok(NormalizationStats { min, max })
}

pub fn fit_minmax_segments(segments: &[VoyageSegment]) -> Result<NormalizationStats> {
    let rows: Vec<[f64; N_VARS]> = segments
        .iter()
        .flat_map(|s| s.records.iter().map(AisRecord::row))
        .collect();
    fit_minmax(rows.iter())
}

/// A `window_in + window_out` slice of one segment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub mmsi: u64,
    /// Timestamp of the first row, seconds.
    pub start_ts: i64,
    /// Seconds between rows.
    pub interval_s: i64,
    pub rows: Vec<[f64; N_VARS]>,
}

impl Window {
    pub fn input(&self, window_in: usize) -> &[[f64; N_VARS]] {
        &self.rows[..window_in]
    }

    pub fn target(&self, window_in: usize) -> &[[f64; N_VARS]] {
        &self.rows[window_in..]
    }

    pub fn timestamp(&self, step: usize) -> i64 {
        self.start_ts + step as i64 * self.interval_s
    }
}

/// Stride-1 windows; a segment of `n >= 42` points yields `n - 41`.
pub fn make_windows(segment: &VoyageSegment, profile: &PipelineProfile) -> Vec<Window> {
    let w = profile.window_len();
    if segment.len() < w {
        return Vec::new();
    }
    let interval_s = (profile.resample_interval * 60.0).round() as i64;
    segment
        .records
        .windows(w)
        .map(|recs| Window {
            mmsi: segment.mmsi,
            start_ts: recs[0].timestamp.round() as i64,
            interval_s,
            rows: recs.iter().map(AisRecord::row).collect(),
        })
        .collect()
}

/// Seeded 80/20 split of `n` items; returns sorted (train, test) indices.
pub fn split_indices(n: usize, train_frac: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (train_frac * n as f64).floor() as usize;
    let mut train = idx[..n_train].to_vec();
    let mut test = idx[n_train..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

pub const SHARD_MAGIC: &[u8; 4] = b"AISW";
pub const SHARD_VERSION: u32 = 1;

/// Writes windows in the flat shard layout.
pub fn write_shard<W: Write>(mut w: W, windows: &[Window], rows_per_window: usize) -> Result<()> {
    w.write_all(SHARD_MAGIC)?;
    w.write_all(&SHARD_VERSION.to_le_bytes())?;
    w.write_all(&(windows.len() as u64).to_le_bytes())?;
    let mut buf = Vec::with_capacity(16 + rows_per_window * N_VARS * 8);
    for win in windows {
        if win.rows.len() != rows_per_window {
            return Err(Error::ShapeMismatch(vec![win.rows.len(), N_VARS], vec![rows_per_window, N_VARS]));
        }
        buf.clear();
        buf.extend_from_slice(&win.mmsi.to_le_bytes());
        buf.extend_from_slice(&win.start_ts.to_le_bytes());
        for row in &win.rows {
            for v in row {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

pub fn read_shard(bytes: &[u8], rows_per_window: usize, interval_s: i64) -> Result<Vec<Window>> {
    let bad = |m: &str| Error::Format(format!("shard: {m}"));
    if bytes.len() < 16 || &bytes[..4] != SHARD_MAGIC {
        return Err(bad("bad header"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != SHARD_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let count = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let per = 16 + rows_per_window * N_VARS * 8;
    if bytes.len() != 16 + count.saturating_mul(per) {
        return Err(bad("length does not match window count"));
    }
    let f = |b: &[u8]| f64::from_le_bytes(b.try_into().expect("8 bytes"));
    Ok(bytes[16..]
        .chunks_exact(per)
        .map(|c| Window {
            mmsi: u64::from_le_bytes(c[..8].try_into().expect("8 bytes")),
            start_ts: i64::from_le_bytes(c[8..16].try_into().expect("8 bytes")),
            interval_s,
            rows: c[16..]
                .chunks_exact(N_VARS * 8)
                .map(|r| std::array::from_fn(|v| f(&r[v * 8..v * 8 + 8])))
                .collect(),
        })
        .collect())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageCounts {
    pub rows_read: usize,
    pub rows_skipped: usize,
    pub removed_speed: usize,
    pub removed_status: usize,
    pub removed_coast: usize,
    pub rows_kept: usize,
    pub raw_segments: usize,
    pub dropped_few_messages: usize,
    pub resampled_segments: usize,
    pub segments: usize,
    pub train_segments: usize,
    pub test_segments: usize,
    pub train_windows: usize,
    pub test_windows: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardEntry {
    pub file: String,
    pub split: String,
    pub windows: usize,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub profile: PipelineProfile,
    pub counts: StageCounts,
    pub stats: NormalizationStats,
    pub source_sha256: String,
    pub split_seed: u64,
    pub train_fraction: f64,
    pub coastline_applied: bool,
    pub shards: Vec<ShardEntry>,
    /// Free-form provenance fields (for example the generator settings).
    #[serde(default)]
    pub extra: BTreeMap<String, serde_json::Value>,
    /// Wall-clock creation time; excluded from [`DatasetManifest::content_hash`].
    pub created_at: String,
}

impl DatasetManifest {
    /// Hash over every field except `created_at`.
    pub fn content_hash(&self) -> String {
        let mut copy = self.clone();
        copy.created_at.clear();
        sha256_hex(&serde_json::to_vec(&copy).expect("manifest serialises"))
    }
}

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn write_manifest(dir: &Path, manifest: &DatasetManifest) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, serde_json::to_string_pretty(manifest)?)?;
    Ok(path)
}

/// Reads a manifest and checks every listed shard against its recorded hash.
/// `path` may be the manifest file or its directory.
pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let path = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
    let manifest: DatasetManifest = serde_json::from_slice(&fs::read(&path)?)?;
    let dir = path.parent().unwrap_or(Path::new("."));
    for shard in &manifest.shards {
        let found = sha256_hex(&fs::read(dir.join(&shard.file))?);
        if found != shard.sha256 {
            return Err(Error::HashMismatch {
                path: shard.file.clone(),
                expected: shard.sha256.clone(),
                found,
            });
        }
    }
    Ok(manifest)
}

/// Writes a shard file under `dir` and returns its manifest entry.
pub fn store_shard(dir: &Path, file: &str, split: &str, windows: &[Window], rows: usize) -> Result<ShardEntry> {
    let mut bytes = Vec::new();
    write_shard(&mut bytes, windows, rows)?;
    fs::create_dir_all(dir)?;
    fs::write(dir.join(file), &bytes)?;
    Ok(ShardEntry {
        file: file.to_string(),
        split: split.to_string(),
        windows: windows.len(),
        sha256: sha256_hex(&bytes),
    })
}

/// Options for [`run_pipeline`].
#[derive(Clone, Debug)]
pub struct PipelineOptions {
    pub profile: PipelineProfile,
    pub columns: ColumnMap,
    pub coastline: Option<Vec<Vec<GeoPoint>>>,
    pub seed: u64,
    pub train_fraction: f64,
}

/// Output of [`run_pipeline`] before anything is written.
#[derive(Clone, Debug)]
pub struct PipelineResult {
    pub counts: StageCounts,
    pub segments: Vec<VoyageSegment>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub stats: NormalizationStats,
}

/// Parse, filter, segment, resample, enforce lengths, split and fit normalisation.
pub fn process(source: &[u8], opts: &PipelineOptions) -> Result<PipelineResult> {
    let profile = &opts.profile;
    profile.validate()?;
    let parsed = parse_ais_csv(source, &opts.columns)?;
    let mut counts = StageCounts {
        rows_read: parsed.records.len() + parsed.skipped,
        rows_skipped: parsed.skipped,
        ..Default::default()
    };
    let (kept, fc) = filter_records(parsed.records, profile, opts.coastline.as_deref());
    counts.removed_speed = fc.speed;
    counts.removed_status = fc.status;
    counts.removed_coast = fc.coast;
    counts.rows_kept = kept.len();

    let raw = segment_voyages(kept, profile);
    counts.raw_segments = raw.len();
    let min_messages = profile.min_messages.max(2);
    let (raw, few): (Vec<_>, Vec<_>) = raw.into_iter().partition(|s| s.len() >= min_messages);
    counts.dropped_few_messages = few.len();
    let resampled: Vec<VoyageSegment> = raw
        .par_iter()
        .map(|s| resample_linear(s, profile))
        .collect::<Result<_>>()?;
    counts.resampled_segments = resampled.len();
    let segments = enforce_length_and_split(resampled, profile);
    counts.segments = segments.len();

    let (train, test) = split_indices(segments.len(), opts.train_fraction, opts.seed);
    let train_segments: Vec<VoyageSegment> = train.iter().map(|&i| segments[i].clone()).collect();
    let stats = fit_minmax_segments(&train_segments)?;
    let windows_of = |idx: &[usize]| idx.iter().map(|&i| segments[i].len() + 1 - profile.window_len()).sum();
    counts.train_segments = train.len();
    counts.test_segments = test.len();
    counts.train_windows = windows_of(&train);
    counts.test_windows = windows_of(&test);
    Ok(PipelineResult {
        counts,
        segments,
        train,
        test,
        stats,
    })
}

/// Full preprocessing run writing normalised window shards and a manifest to `out`.
pub fn run_pipeline(source: &[u8], opts: &PipelineOptions, out: &Path) -> Result<DatasetManifest> {
    let result = process(source, opts)?;
    let profile = &opts.profile;
    let normalized = |idx: &[usize]| -> Vec<Window> {
        idx.iter()
            .flat_map(|&i| make_windows(&result.segments[i], profile))
            .map(|mut w| {
                w.rows = result.stats.apply_rows(&w.rows);
                w
            })
            .collect()
    };
    let rows = profile.window_len();
    let shards = vec![
        store_shard(out, "train.aisw", "train", &normalized(&result.train), rows)?,
        store_shard(out, "test.aisw", "test", &normalized(&result.test), rows)?,
    ];
    let manifest = DatasetManifest {
        profile: profile.clone(),
        counts: result.counts,
        stats: result.stats,
        source_sha256: sha256_hex(source),
        split_seed: opts.seed,
        train_fraction: opts.train_fraction,
        coastline_applied: opts.coastline.is_some(),
        shards,
        extra: BTreeMap::new(),
        created_at: chrono::Utc::now().to_rfc3339(),
    };
    write_manifest(out, &manifest)?;
    Ok(manifest)
}
