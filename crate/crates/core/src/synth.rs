//! Synthetic traffic, anomaly injection, CRI labelling and labelled datasets.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ais::{
    make_windows, read_manifest, read_shard, split_indices, store_shard, write_manifest, AisRecord, DatasetManifest,
    NavStatus, NormalizationStats, PipelineProfile, ShardEntry, StageCounts, VoyageSegment, Window, N_VARS,
};
use crate::briefing::generate_target_explanation;
use crate::error::{Error, Result};
use crate::geo::{
    cri, dcpa_tcpa, dead_reckon, encounter_geometry, normalize_deg, CriWeights, GeoPoint, KinematicState,
};

/// Epoch of the first synthetic time slot (2024-01-01T00:00:00Z).
pub const SYNTH_EPOCH: i64 = 1_704_067_200;

/// Latitude/longitude box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub lat_min: f64,
    pub lat_max: f64,
    pub lon_min: f64,
    pub lon_max: f64,
}

impl Default for Region {
    fn default() -> Self {
        Self {
            lat_min: 37.5,
            lat_max: 38.0,
            lon_min: 23.2,
            lon_max: 23.8,
        }
    }
}

impl Region {
    pub fn contains(&self, lat: f64, lon: f64, margin: f64) -> bool {
        (self.lat_min - margin..=self.lat_max + margin).contains(&lat)
            && (self.lon_min - margin..=self.lon_max + margin).contains(&lon)
    }

    fn sample(&self, rng: &mut ChaCha8Rng, inset: f64) -> (f64, f64) {
        let dl = (self.lat_max - self.lat_min) * inset;
        let dn = (self.lon_max - self.lon_min) * inset;
        (
            rng.gen_range(self.lat_min + dl..=self.lat_max - dl),
            rng.gen_range(self.lon_min + dn..=self.lon_max - dn),
        )
    }

    fn center(&self) -> (f64, f64) {
        ((self.lat_min + self.lat_max) / 2.0, (self.lon_min + self.lon_max) / 2.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrackKind {
    Straight,
    SpeedRamp,
    Turn,
    Crossing,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_segments: usize,
    pub region: Region,
    /// Inclusive range of segment lengths in 1-minute points.
    pub min_len: usize,
    pub max_len: usize,
    pub sog_range: (f64, f64),
    /// Relative frequency of straight, speed-ramp, turn and crossing scenarios.
    pub mix: [f64; 4],
    /// Turn rate bounds, degrees per minute.
    pub turn_rate: (f64, f64),
    /// Speed change bounds for ramps, knots per minute.
    pub accel: (f64, f64),
    /// Closest-approach distance for crossing pairs, NM.
    pub cpa_range: (f64, f64),
    /// Crossing angle between the two courses, degrees.
    pub crossing_angle: (f64, f64),
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            n_segments: 200,
            region: Region::default(),
            min_len: 42,
            max_len: 46,
            sog_range: (8.0, 20.0),
            mix: [0.2, 0.2, 0.3, 0.3],
            turn_rate: (1.0, 4.0),
            accel: (0.1, 0.3),
            cpa_range: (0.0, 2.0),
            crossing_angle: (45.0, 135.0),
        }
    }
}

/// Segments plus the scenario each came from.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticTraffic {
    pub segments: Vec<VoyageSegment>,
    pub kinds: Vec<TrackKind>,
}

const STEP_MIN: f64 = 1.0;

fn record(ts: i64, mmsi: u64, lat: f64, lon: f64, sog: f64, cog: f64) -> Result<AisRecord> {
    Ok(AisRecord {
        timestamp: ts as f64,
        mmsi,
        state: KinematicState::new(GeoPoint::new(lat, lon)?, sog, cog)?,
        nav_status: NavStatus::Underway,
    })
}

/// Integrates positions from per-step speed and course. Step `i` is reached
/// from step `i - 1` by dead reckoning with the speed and course of step `i`.
pub fn integrate_track(start: (f64, f64), sog: &[f64], cog: &[f64], step_min: f64) -> Result<Vec<(f64, f64)>> {
    let mut pos = Vec::with_capacity(sog.len());
    pos.push(start);
    for i in 1..sog.len() {
        let (lat, lon) = pos[i - 1];
        pos.push(dead_reckon(GeoPoint::new(lat, lon)?, sog[i], cog[i], step_min));
    }
    Ok(pos)
}

fn track_segment(mmsi: u64, t0: i64, pos: &[(f64, f64)], sog: &[f64], cog: &[f64]) -> Result<VoyageSegment> {
    let records = (0..pos.len())
        .map(|i| record(t0 + 60 * i as i64, mmsi, pos[i].0, pos[i].1, sog[i], cog[i]))
        .collect::<Result<_>>()?;
    Ok(VoyageSegment { mmsi, records })
}

fn single_track(cfg: &SynthConfig, kind: TrackKind, rng: &mut ChaCha8Rng, len: usize, mmsi: u64, t0: i64) -> Result<VoyageSegment> {
    let start = cfg.region.sample(rng, 0.2);
    let (clat, clon) = cfg.region.center();
    // Head roughly towards the middle of the box so tracks stay inside it.
    let to_center = normalize_deg((clon - start.1).atan2(clat - start.0).to_degrees());
    let cog0 = normalize_deg(to_center + rng.gen_range(-60.0..60.0));
    let sog0 = rng.gen_range(cfg.sog_range.0..=cfg.sog_range.1);
    let mut sog = vec![sog0; len];
    let mut cog = vec![cog0; len];
    match kind {
        TrackKind::SpeedRamp => {
            let a = rng.gen_range(cfg.accel.0..=cfg.accel.1) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            for (i, s) in sog.iter_mut().enumerate() {
                *s = (sog0 + a * i as f64).clamp(3.0, 25.0);
            }
        }
        TrackKind::Turn => {
            let r = rng.gen_range(cfg.turn_rate.0..=cfg.turn_rate.1) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            for (i, c) in cog.iter_mut().enumerate() {
                *c = normalize_deg(cog0 + r * i as f64);
            }
        }
        TrackKind::Straight | TrackKind::Crossing => {}
    }
    let pos = integrate_track(start, &sog, &cog, STEP_MIN)?;
    track_segment(mmsi, t0, &pos, &sog, &cog)
}

fn crossing_pair(cfg: &SynthConfig, rng: &mut ChaCha8Rng, len: usize, mmsi: (u64, u64), t0: i64) -> Result<[VoyageSegment; 2]> {
    let (clat, clon) = cfg.region.sample(rng, 0.35);
    let c1 = rng.gen_range(0.0..360.0);
    let angle = rng.gen_range(cfg.crossing_angle.0..=cfg.crossing_angle.1) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
    let c2 = normalize_deg(c1 + angle);
    let v1 = rng.gen_range(cfg.sog_range.0..=cfg.sog_range.1);
    let v2 = rng.gen_range(cfg.sog_range.0..=cfg.sog_range.1);
    let d = rng.gen_range(cfg.cpa_range.0..=cfg.cpa_range.1);
    let k_cpa = rng.gen_range(len / 3..=2 * len / 3) as f64;

    let vel = |v: f64, c: f64| {
        let r = c.to_radians();
        (v * r.sin(), v * r.cos())
    };
    let (ve1, vn1) = vel(v1, c1);
    let (ve2, vn2) = vel(v2, c2);
    let (rx, ry) = (ve2 - ve1, vn2 - vn1);
    let rn = rx.hypot(ry).max(1e-9);
    // Unit normal to the relative velocity; the target passes at distance d.
    let (nx, ny) = (-ry / rn, rx / rn);
    let back_h = k_cpa * STEP_MIN / 60.0;
    let to_geo = |east: f64, north: f64| (clat + north / 60.0, clon + east / (60.0 * clat.to_radians().cos()));
    let s1 = to_geo(-ve1 * back_h, -vn1 * back_h);
    let s2 = to_geo(d * nx - ve2 * back_h, d * ny - vn2 * back_h);
    let mk = |m: u64, start: (f64, f64), v: f64, c: f64| -> Result<VoyageSegment> {
        let sog = vec![v; len];
        let cog = vec![c; len];
        let pos = integrate_track(start, &sog, &cog, STEP_MIN)?;
        track_segment(m, t0, &pos, &sog, &cog)
    };
    Ok([mk(mmsi.0, s1, v1, c1)?, mk(mmsi.1, s2, v2, c2)?])
}

/// Deterministic mixture of straight transits, speed ramps, constant-rate
/// turns and crossing pairs at 1-minute resolution. Each scenario occupies its
/// own time slot, so only the two vessels of a crossing pair are co-temporal.
pub fn generate_synthetic_traffic(cfg: &SynthConfig) -> Result<SyntheticTraffic> {
    if cfg.n_segments == 0 || cfg.min_len < 2 || cfg.max_len < cfg.min_len {
        return Err(Error::Config("synthetic traffic needs n >= 1 and min_len <= max_len".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut segments = Vec::with_capacity(cfg.n_segments);
    let mut kinds = Vec::with_capacity(cfg.n_segments);
    let total: f64 = cfg.mix.iter().sum();
    let slot = 60 * (cfg.max_len as i64 + 60);
    let mut next_mmsi = 200_000_001u64;
    let mut k = 0i64;
    while segments.len() < cfg.n_segments {
        let t0 = SYNTH_EPOCH + k * slot;
        k += 1;
        let len = rng.gen_range(cfg.min_len..=cfg.max_len);
        let mut u = rng.gen_range(0.0..total);
        let mut kind = TrackKind::Straight;
        for (w, kd) in cfg.mix.iter().zip([TrackKind::Straight, TrackKind::SpeedRamp, TrackKind::Turn, TrackKind::Crossing]) {
            if u < *w {
                kind = kd;
                break;
            }
            u -= w;
        }
        if kind == TrackKind::Crossing && cfg.n_segments - segments.len() < 2 {
            kind = TrackKind::Straight;
        }
        if kind == TrackKind::Crossing {
            let pair = crossing_pair(cfg, &mut rng, len, (next_mmsi, next_mmsi + 1), t0)?;
            next_mmsi += 2;
            segments.extend(pair);
            kinds.extend([TrackKind::Crossing; 2]);
        } else {
            segments.push(single_track(cfg, kind, &mut rng, len, next_mmsi, t0)?);
            next_mmsi += 1;
            kinds.push(kind);
        }
    }
    Ok(SyntheticTraffic { segments, kinds })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnomalyKind {
    Shift,
    Heading,
    Speed,
}

impl AnomalyKind {
    pub const ALL: [AnomalyKind; 3] = [AnomalyKind::Shift, AnomalyKind::Heading, AnomalyKind::Speed];

    pub fn tag(self) -> &'static str {
        match self {
            AnomalyKind::Shift => "shift",
            AnomalyKind::Heading => "heading",
            AnomalyKind::Speed => "speed",
        }
    }

    /// Noun phrase used in briefings.
    pub fn behavior(self) -> &'static str {
        match self {
            AnomalyKind::Shift => "position shift",
            AnomalyKind::Heading => "heading change",
            AnomalyKind::Speed => "speed change",
        }
    }
}

/// Magnitude bounds for injected anomalies.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnomalyBounds {
    /// Shift offset, degrees.
    pub shift: (f64, f64),
    /// Absolute heading delta, degrees.
    pub heading: (f64, f64),
    pub speed_up: (f64, f64),
    pub speed_down: (f64, f64),
    /// Span length as a fraction of the input window.
    pub span_frac: (f64, f64),
}

impl Default for AnomalyBounds {
    fn default() -> Self {
        Self {
            shift: (0.005, 0.02),
            heading: (30.0, 90.0),
            speed_up: (1.8, 2.5),
            speed_down: (0.1, 0.4),
            span_frac: (0.2, 0.5),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnomalySpec {
    pub kind: AnomalyKind,
    /// Half-open step range `[start, end)` inside the window.
    pub start: usize,
    pub end: usize,
    /// Shift: offset in degrees. Heading: signed delta in degrees. Speed: factor.
    pub magnitude: f64,
    /// Direction of a shift offset, degrees clockwise from north.
    #[serde(default)]
    pub direction: f64,
    pub seed: u64,
}

impl AnomalySpec {
    pub fn validate(&self, len: usize, bounds: &AnomalyBounds) -> Result<()> {
        if self.start == 0 || self.start >= self.end || self.end > len {
            return Err(Error::SpanOutOfBounds {
                start: self.start,
                end: self.end,
                len,
            });
        }
        let m = self.magnitude;
        let within = |(lo, hi): (f64, f64), v: f64| v >= lo && v <= hi;
        let ok = match self.kind {
            AnomalyKind::Shift => within(bounds.shift, m),
            AnomalyKind::Heading => within(bounds.heading, m.abs()),
            AnomalyKind::Speed => within(bounds.speed_up, m) || within(bounds.speed_down, m),
        };
        if !ok || !self.direction.is_finite() {
            return Err(Error::InvalidSpec(format!(
                "{} magnitude {m} outside the bound table",
                self.kind.tag()
            )));
        }
        Ok(())
    }

    /// Draws a spec whose span lies inside the first `window_in` steps.
    pub fn sample(seed: u64, window_in: usize, bounds: &AnomalyBounds) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let kind = AnomalyKind::ALL[rng.gen_range(0..3)];
        let lo = ((bounds.span_frac.0 * window_in as f64).ceil() as usize).max(1);
        let hi = ((bounds.span_frac.1 * window_in as f64).floor() as usize).clamp(lo, window_in - 1);
        let span = rng.gen_range(lo..=hi);
        let start = rng.gen_range(1..=window_in - span);
        let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let magnitude = match kind {
            AnomalyKind::Shift => rng.gen_range(bounds.shift.0..=bounds.shift.1),
            AnomalyKind::Heading => sign * rng.gen_range(bounds.heading.0..=bounds.heading.1),
            AnomalyKind::Speed if sign > 0.0 => rng.gen_range(bounds.speed_up.0..=bounds.speed_up.1),
            AnomalyKind::Speed => rng.gen_range(bounds.speed_down.0..=bounds.speed_down.1),
        };
        Self {
            kind,
            start,
            end: start + span,
            magnitude,
            direction: if kind == AnomalyKind::Shift { rng.gen_range(0.0..360.0) } else { 0.0 },
            seed,
        }
    }
}

/// Applies an anomaly. A shift offsets positions inside the span only.
/// Heading and speed anomalies change course or speed inside the span and
/// re-integrate positions from the step before it; later steps keep their
/// original increments.
pub fn inject_anomaly(window: &Window, spec: &AnomalySpec, bounds: &AnomalyBounds) -> Result<Window> {
    spec.validate(window.rows.len(), bounds)?;
    let mut rows = window.rows.clone();
    let span = spec.start..spec.end;
    match spec.kind {
        AnomalyKind::Shift => {
            let d = spec.direction.to_radians();
            for r in &mut rows[span] {
                r[0] += spec.magnitude * d.cos();
                r[1] += spec.magnitude * d.sin();
            }
        }
        AnomalyKind::Heading | AnomalyKind::Speed => {
            for i in span {
                if spec.kind == AnomalyKind::Heading {
                    rows[i][3] = normalize_deg(rows[i][3] + spec.magnitude);
                } else {
                    rows[i][2] *= spec.magnitude;
                }
                let prev = GeoPoint::new(rows[i - 1][0], rows[i - 1][1])?;
                let (lat, lon) = dead_reckon(prev, rows[i][2], rows[i][3], window.interval_s as f64 / 60.0);
                rows[i][0] = lat;
                rows[i][1] = lon;
            }
            for i in spec.end..rows.len() {
                for v in 0..2 {
                    rows[i][v] = rows[i - 1][v] + (window.rows[i][v] - window.rows[i - 1][v]);
                }
            }
        }
    }
    Ok(Window { rows, ..window.clone() })
}

/// Kinematics of the riskiest co-temporal contact.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncounterSummary {
    pub target_mmsi: u64,
    pub range: f64,
    pub rel_bearing: f64,
    pub dcpa: f64,
    pub tcpa: f64,
    pub speed_ratio: f64,
    pub cri: f64,
}

/// Contacts farther than this (NM) are ignored.
pub const CONTACT_RANGE_NM: f64 = 10.0;

/// Vessel states indexed by timestamp.
pub struct TrafficIndex {
    by_time: HashMap<i64, Vec<(u64, KinematicState)>>,
}

impl TrafficIndex {
    pub fn new(segments: &[VoyageSegment]) -> Self {
        let mut by_time: HashMap<i64, Vec<(u64, KinematicState)>> = HashMap::new();
        for seg in segments {
            for r in &seg.records {
                by_time.entry(r.timestamp.round() as i64).or_default().push((seg.mmsi, r.state));
            }
        }
        Self { by_time }
    }

    /// States of every vessel other than `mmsi` reporting at `ts`.
    pub fn others(&self, ts: i64, mmsi: u64) -> impl Iterator<Item = &(u64, KinematicState)> {
        self.by_time
            .get(&ts)
            .into_iter()
            .flatten()
            .filter(move |(m, _)| *m != mmsi)
    }
}

fn state_of(row: &[f64; N_VARS]) -> Result<KinematicState> {
    KinematicState::new(GeoPoint::new(row[0], row[1])?, row[2].max(0.0), row[3])
}

/// Maximum CRI over contacts within 10 NM at the last input step, with the
/// encounter that produced it. `(0, None)` for an isolated vessel.
pub fn label_cri(
    window: &Window,
    window_in: usize,
    index: &TrafficIndex,
    weights: &CriWeights,
) -> Result<(f64, Option<EncounterSummary>)> {
    let own = state_of(&window.rows[window_in - 1])?;
    let ts = window.timestamp(window_in - 1);
    let mut best: Option<EncounterSummary> = None;
    for (mmsi, target) in index.others(ts, window.mmsi) {
        let g = encounter_geometry(&own, target);
        if g.range > CONTACT_RANGE_NM {
            continue;
        }
        let risk = cri(&g, weights);
        let (dcpa, tcpa) = dcpa_tcpa(&g);
        let better = match &best {
            None => true,
            Some(b) => risk > b.cri || (risk == b.cri && *mmsi < b.target_mmsi),
        };
        if better {
            best = Some(EncounterSummary {
                target_mmsi: *mmsi,
                range: g.range,
                rel_bearing: g.rel_bearing,
                dcpa,
                tcpa,
                speed_ratio: g.speed_ratio,
                cri: risk,
            });
        }
    }
    Ok((best.map_or(0.0, |b| b.cri), best))
}

/// One training or evaluation sample in physical units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledWindow {
    pub window: Window,
    pub anomaly_label: u8,
    pub anomaly_spec: Option<AnomalySpec>,
    pub cri_target: f64,
    pub encounter: Option<EncounterSummary>,
    pub explanation: String,
}

impl LabeledWindow {
    pub fn anomaly_kind(&self) -> Option<AnomalyKind> {
        self.anomaly_spec.as_ref().map(|s| s.kind)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub anomaly_ratio: f64,
    pub seed: u64,
    pub train_fraction: f64,
    pub window_in: usize,
    pub window_out: usize,
    pub cri: CriWeights,
    pub bounds: AnomalyBounds,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            anomaly_ratio: 0.3,
            seed: 42,
            train_fraction: 0.8,
            window_in: 18,
            window_out: 24,
            cri: CriWeights::default(),
            bounds: AnomalyBounds::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub windows: Vec<LabeledWindow>,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub stats: NormalizationStats,
}

fn mix_seed(seed: u64, i: u64) -> u64 {
    let mut x = seed ^ i.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Windows every segment, injects anomalies into exactly
/// `round(ratio * n)` seeded windows, labels CRI and attaches explanations.
/// Train/validation membership follows a seeded split of the segments.
pub fn build_labeled_dataset(segments: &[VoyageSegment], cfg: &DatasetConfig) -> Result<LabeledDataset> {
    if !(0.0..=1.0).contains(&cfg.anomaly_ratio) {
        return Err(Error::Config(format!("anomaly ratio {}", cfg.anomaly_ratio)));
    }
    let profile = synth_profile(cfg);
    let (train_segs, _) = split_indices(segments.len(), cfg.train_fraction, cfg.seed);
    let mut is_train = vec![false; segments.len()];
    for &i in &train_segs {
        is_train[i] = true;
    }
    let mut windows = Vec::new();
    let mut window_train = Vec::new();
    for (si, seg) in segments.iter().enumerate() {
        for w in make_windows(seg, &profile) {
            windows.push(w);
            window_train.push(is_train[si]);
        }
    }
    let n = windows.len();
    let quota = (cfg.anomaly_ratio * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0xA11)));
    let mut chosen = vec![false; n];
    for &i in &order[..quota] {
        chosen[i] = true;
    }

    let index = TrafficIndex::new(segments);
    let out = windows
        .into_par_iter()
        .enumerate()
        .map(|(i, w)| {
            let spec = chosen[i].then(|| AnomalySpec::sample(mix_seed(cfg.seed, i as u64 + 1), cfg.window_in, &cfg.bounds));
            let window = match &spec {
                Some(s) => inject_anomaly(&w, s, &cfg.bounds)?,
                None => w,
            };
            let (cri_target, encounter) = label_cri(&window, cfg.window_in, &index, &cfg.cri)?;
            let kind = spec.as_ref().map(|s| s.kind);
            let explanation = generate_target_explanation(&window, cfg.window_in, kind, cri_target);
            Ok(LabeledWindow {
                window,
                anomaly_label: spec.is_some() as u8,
                anomaly_spec: spec,
                cri_target,
                encounter,
                explanation,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let train: Vec<usize> = (0..n).filter(|&i| window_train[i]).collect();
    let val: Vec<usize> = (0..n).filter(|&i| !window_train[i]).collect();
    let train_rows: Vec<[f64; N_VARS]> = train_segs
        .iter()
        .flat_map(|&i| segments[i].records.iter().map(AisRecord::row))
        .collect();
    let stats = crate::ais::fit_minmax(train_rows.iter())?;
    Ok(LabeledDataset {
        windows: out,
        train,
        val,
        stats,
    })
}

pub const LABEL_MAGIC: &[u8; 4] = b"AISL";
pub const LABEL_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct LabelMeta {
    spec: Option<AnomalySpec>,
    encounter: Option<EncounterSummary>,
    explanation: String,
}

/// Sidecar label file matching a shard window for window.
pub fn write_labels(path: &Path, windows: &[&LabeledWindow]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(LABEL_MAGIC);
    buf.extend_from_slice(&LABEL_VERSION.to_le_bytes());
    buf.extend_from_slice(&(windows.len() as u64).to_le_bytes());
    for w in windows {
        buf.push(w.anomaly_label);
        buf.extend_from_slice(&w.cri_target.to_le_bytes());
        let meta = serde_json::to_vec(&LabelMeta {
            spec: w.anomaly_spec.clone(),
            encounter: w.encounter,
            explanation: w.explanation.clone(),
        })?;
        buf.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        buf.extend_from_slice(&meta);
    }
    fs::write(path, &buf)?;
    Ok(buf)
}

/// Reads a sidecar and attaches its labels to `windows`.
pub fn read_labels(bytes: &[u8], windows: Vec<Window>) -> Result<Vec<LabeledWindow>> {
    let bad = |m: &str| Error::Format(format!("labels: {m}"));
    if bytes.len() < 16 || &bytes[..4] != LABEL_MAGIC {
        return Err(bad("bad header"));
    }
    let count = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    if count != windows.len() {
        return Err(bad(&format!("{count} labels for {} windows", windows.len())));
    }
    let mut pos = 16;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = bytes.get(pos..pos + n).ok_or_else(|| bad("truncated"))?;
        pos += n;
        Ok(s)
    };
    let mut out = Vec::with_capacity(count);
    for window in windows {
        let label = take(1)?[0];
        let cri_target = f64::from_le_bytes(take(8)?.try_into().expect("8 bytes"));
        let len = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
        let meta: LabelMeta = serde_json::from_slice(take(len)?)?;
        out.push(LabeledWindow {
            window,
            anomaly_label: label,
            anomaly_spec: meta.spec,
            cri_target,
            encounter: meta.encounter,
            explanation: meta.explanation,
        });
    }
    Ok(out)
}

fn synth_profile(cfg: &DatasetConfig) -> PipelineProfile {
    PipelineProfile {
        name: "synthetic".into(),
        window_in: cfg.window_in,
        window_out: cfg.window_out,
        min_points: cfg.window_in + cfg.window_out,
        ..PipelineProfile::piraeus()
    }
}

/// Writes normalised window shards, label sidecars and a manifest to `dir`.
pub fn save_dataset(
    dir: &Path,
    data: &LabeledDataset,
    cfg: &DatasetConfig,
    synth: Option<&SynthConfig>,
) -> Result<DatasetManifest> {
    fs::create_dir_all(dir)?;
    let rows = cfg.window_in + cfg.window_out;
    let mut shards: Vec<ShardEntry> = Vec::new();
    let mut counts = StageCounts::default();
    for (split, idx) in [("train", &data.train), ("test", &data.val)] {
        let picked: Vec<&LabeledWindow> = idx.iter().map(|&i| &data.windows[i]).collect();
        let normalized: Vec<Window> = picked
            .iter()
            .map(|lw| Window {
                rows: data.stats.apply_rows(&lw.window.rows),
                ..lw.window.clone()
            })
            .collect();
        shards.push(store_shard(dir, &format!("{split}.aisw"), split, &normalized, rows)?);
        let file = format!("{split}.aisl");
        let bytes = write_labels(&dir.join(&file), &picked)?;
        shards.push(ShardEntry {
            file,
            split: format!("{split}-labels"),
            windows: picked.len(),
            sha256: crate::ais::sha256_hex(&bytes),
        });
    }
    counts.train_windows = data.train.len();
    counts.test_windows = data.val.len();
    let mut extra = std::collections::BTreeMap::new();
    extra.insert("dataset".into(), serde_json::to_value(cfg)?);
    if let Some(s) = synth {
        extra.insert("generator".into(), serde_json::to_value(s)?);
    }
    let manifest = DatasetManifest {
        profile: synth_profile(cfg),
        counts,
        stats: data.stats.clone(),
        source_sha256: String::new(),
        split_seed: cfg.seed,
        train_fraction: cfg.train_fraction,
        coastline_applied: false,
        shards,
        extra,
        created_at: chrono::Utc::now().to_rfc3339(),
    };
    write_manifest(dir, &manifest)?;
    Ok(manifest)
}

/// A labelled dataset read back from disk, in physical units.
#[derive(Clone, Debug)]
pub struct StoredDataset {
    pub manifest: DatasetManifest,
    pub train: Vec<LabeledWindow>,
    pub test: Vec<LabeledWindow>,
}

impl StoredDataset {
    pub fn config(&self) -> Result<DatasetConfig> {
        match self.manifest.extra.get("dataset") {
            Some(v) => Ok(serde_json::from_value(v.clone())?),
            None => Err(Error::Format("manifest lacks dataset settings".into())),
        }
    }
}

/// Loads a dataset written by [`save_dataset`], verifying shard hashes.
pub fn load_dataset(dir: &Path) -> Result<StoredDataset> {
    let manifest = read_manifest(dir)?;
    let rows = manifest.profile.window_len();
    let interval = (manifest.profile.resample_interval * 60.0).round() as i64;
    let split = |name: &str| -> Result<Vec<LabeledWindow>> {
        let windows = read_shard(&fs::read(dir.join(format!("{name}.aisw")))?, rows, interval)?;
        let windows = windows
            .into_iter()
            .map(|w| Window {
                rows: manifest.stats.invert_rows(&w.rows),
                ..w
            })
            .collect();
        read_labels(&fs::read(dir.join(format!("{name}.aisl")))?, windows)
    };
    let train = split("train")?;
    let test = split("test")?;
    Ok(StoredDataset { manifest, train, test })
}
