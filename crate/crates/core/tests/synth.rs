use aisllm_core::ais::{make_windows, PipelineProfile, VoyageSegment, Window, N_VARS};
use aisllm_core::geo::{cri, dcpa_tcpa, encounter_geometry, haversine_nm, CriWeights, GeoPoint, KinematicState};
use aisllm_core::synth::*;
use aisllm_core::Error;
use proptest::prelude::*;

fn straight_window(sog: f64, cog: f64) -> Window {
    let sogs = vec![sog; 42];
    let cogs = vec![cog; 42];
    let pos = integrate_track((37.6, 23.5), &sogs, &cogs, 1.0).unwrap();
    Window {
        mmsi: 9,
        start_ts: SYNTH_EPOCH,
        interval_s: 60,
        rows: (0..42).map(|i| [pos[i].0, pos[i].1, sogs[i], cogs[i]]).collect(),
    }
}

fn segment_from(mmsi: u64, t0: i64, rows: &[[f64; N_VARS]]) -> VoyageSegment {
    use aisllm_core::ais::{AisRecord, NavStatus};
    VoyageSegment {
        mmsi,
        records: rows
            .iter()
            .enumerate()
            .map(|(i, r)| AisRecord {
                timestamp: (t0 + 60 * i as i64) as f64,
                mmsi,
                state: KinematicState::new(GeoPoint::new(r[0], r[1]).unwrap(), r[2], r[3]).unwrap(),
                nav_status: NavStatus::Underway,
            })
            .collect(),
    }
}

fn only(kind: usize, n: usize, seed: u64) -> SynthConfig {
    let mut mix = [0.0; 4];
    mix[kind] = 1.0;
    SynthConfig {
        seed,
        n_segments: n,
        mix,
        ..SynthConfig::default()
    }
}

#[test]
fn generator_is_deterministic() {
    let cfg = SynthConfig {
        n_segments: 30,
        ..SynthConfig::default()
    };
    let a = serde_json::to_vec(&generate_synthetic_traffic(&cfg).unwrap().segments).unwrap();
    let b = serde_json::to_vec(&generate_synthetic_traffic(&cfg).unwrap().segments).unwrap();
    assert_eq!(a, b);
    let other = SynthConfig { seed: 43, ..cfg };
    assert_ne!(a, serde_json::to_vec(&generate_synthetic_traffic(&other).unwrap().segments).unwrap());
}

#[test]
fn generator_output_shape() {
    let cfg = SynthConfig {
        n_segments: 60,
        ..SynthConfig::default()
    };
    let t = generate_synthetic_traffic(&cfg).unwrap();
    assert_eq!(t.segments.len(), 60);
    assert_eq!(t.kinds.len(), 60);
    for seg in &t.segments {
        assert!(seg.len() >= 42 && seg.len() <= cfg.max_len);
        for p in seg.records.windows(2) {
            assert_eq!(p[1].timestamp - p[0].timestamp, 60.0);
        }
        assert!(seg
            .records
            .iter()
            .all(|r| cfg.region.contains(r.state.position.lat(), r.state.position.lon(), 1.0)));
    }
    assert!(t.kinds.contains(&TrackKind::Crossing) && t.kinds.contains(&TrackKind::Turn));
}

#[test]
fn ten_knot_transit_spacing() {
    let w = straight_window(10.0, 63.0);
    for p in w.rows.windows(2) {
        let d = haversine_nm(GeoPoint::new(p[0][0], p[0][1]).unwrap(), GeoPoint::new(p[1][0], p[1][1]).unwrap());
        assert!((d - 1.0 / 6.0).abs() < 1e-3, "{d}");
    }
}

#[test]
fn generated_tracks_are_kinematically_consistent() {
    let t = generate_synthetic_traffic(&SynthConfig {
        n_segments: 40,
        ..SynthConfig::default()
    })
    .unwrap();
    for seg in &t.segments {
        for p in seg.records.windows(2) {
            let d = haversine_nm(p[0].state.position, p[1].state.position);
            assert!((d - p[1].state.sog() / 60.0).abs() < 1e-3);
        }
    }
}

#[test]
fn scripted_crossing_passes_close() {
    let cfg = SynthConfig {
        cpa_range: (0.1, 0.1),
        ..only(3, 20, 5)
    };
    let t = generate_synthetic_traffic(&cfg).unwrap();
    for pair in t.segments.chunks(2) {
        let (a, b) = (&pair[0].records[0], &pair[1].records[0]);
        assert_eq!(a.timestamp, b.timestamp);
        let (dcpa, _) = dcpa_tcpa(&encounter_geometry(&a.state, &b.state));
        assert!(dcpa <= 0.12, "dcpa {dcpa}");
        // Independent check: the closest sampled approach is near the scripted distance.
        let closest = pair[0]
            .records
            .iter()
            .zip(&pair[1].records)
            .map(|(x, y)| haversine_nm(x.state.position, y.state.position))
            .fold(f64::MAX, f64::min);
        assert!(closest < 0.5, "closest sampled {closest}");
    }
}

fn bounds() -> AnomalyBounds {
    AnomalyBounds::default()
}

#[test]
fn zero_magnitude_is_rejected() {
    let w = straight_window(12.0, 45.0);
    for kind in AnomalyKind::ALL {
        let spec = AnomalySpec {
            kind,
            start: 5,
            end: 12,
            magnitude: 0.0,
            direction: 0.0,
            seed: 0,
        };
        assert!(matches!(inject_anomaly(&w, &spec, &bounds()), Err(Error::InvalidSpec(_))));
    }
}

#[test]
fn span_out_of_bounds() {
    let w = straight_window(12.0, 45.0);
    for (start, end) in [(0, 5), (10, 10), (30, 43)] {
        let spec = AnomalySpec {
            kind: AnomalyKind::Shift,
            start,
            end,
            magnitude: 0.01,
            direction: 0.0,
            seed: 0,
        };
        assert!(matches!(inject_anomaly(&w, &spec, &bounds()), Err(Error::SpanOutOfBounds { .. })));
    }
}

#[test]
fn shift_offsets_span_only() {
    let w = straight_window(12.0, 45.0);
    let spec = AnomalySpec {
        kind: AnomalyKind::Shift,
        start: 5,
        end: 12,
        magnitude: 0.01,
        direction: 0.0,
        seed: 0,
    };
    let out = inject_anomaly(&w, &spec, &bounds()).unwrap();
    for i in 0..42 {
        let d = out.rows[i][0] - w.rows[i][0];
        if (5..12).contains(&i) {
            assert!((d - 0.01).abs() < 1e-12);
        } else {
            assert_eq!(out.rows[i], w.rows[i]);
        }
        assert_eq!(out.rows[i][1], w.rows[i][1]);
        assert_eq!(out.rows[i][2..], w.rows[i][2..]);
    }
}

#[test]
fn speed_anomaly_matches_dead_reckoning_oracle() {
    let w = straight_window(12.0, 45.0);
    let spec = AnomalySpec {
        kind: AnomalyKind::Speed,
        start: 5,
        end: 12,
        magnitude: 2.0,
        direction: 0.0,
        seed: 0,
    };
    let out = inject_anomaly(&w, &spec, &bounds()).unwrap();
    // Plane sailing by hand: 24 kn for one minute at course 45 from the previous fix.
    let (mut lat, mut lon) = (w.rows[4][0], w.rows[4][1]);
    for i in 5..12 {
        let nm = 24.0 / 60.0;
        let c = 45f64.to_radians();
        let new_lat = lat + nm * c.cos() / 60.0;
        lon += nm * c.sin() / (60.0 * lat.to_radians().cos());
        lat = new_lat;
        assert!((out.rows[i][0] - lat).abs() < 1e-6 && (out.rows[i][1] - lon).abs() < 1e-6);
        assert_eq!(out.rows[i][2], 24.0);
    }
    // Past the span the original increments resume from the displaced position.
    for i in 12..42 {
        for v in 0..2 {
            let inc = out.rows[i][v] - out.rows[i - 1][v];
            assert!((inc - (w.rows[i][v] - w.rows[i - 1][v])).abs() < 1e-12);
        }
    }
    assert_eq!(out.rows[..5], w.rows[..5]);
}

#[test]
fn heading_anomaly_rotates_course() {
    let w = straight_window(12.0, 350.0);
    let spec = AnomalySpec {
        kind: AnomalyKind::Heading,
        start: 3,
        end: 9,
        magnitude: 40.0,
        direction: 0.0,
        seed: 0,
    };
    let out = inject_anomaly(&w, &spec, &bounds()).unwrap();
    for i in 3..9 {
        assert!((out.rows[i][3] - 30.0).abs() < 1e-9);
        let prev = GeoPoint::new(out.rows[i - 1][0], out.rows[i - 1][1]).unwrap();
        let cur = GeoPoint::new(out.rows[i][0], out.rows[i][1]).unwrap();
        let brg = aisllm_core::geo::initial_bearing(prev, cur).unwrap();
        assert!((brg - 30.0).abs() < 0.01, "{brg}");
    }
    assert_eq!(out.rows[2], w.rows[2]);
}

fn own_rows(lat: f64, lon: f64, sog: f64, cog: f64) -> Vec<[f64; N_VARS]> {
    let s = vec![sog; 42];
    let c = vec![cog; 42];
    integrate_track((lat, lon), &s, &c, 1.0)
        .unwrap()
        .into_iter()
        .map(|(la, lo)| [la, lo, sog, cog])
        .collect()
}

fn window_of(seg: &VoyageSegment) -> Window {
    make_windows(seg, &PipelineProfile::piraeus()).remove(0)
}

#[test]
fn isolated_vessel_has_zero_risk() {
    let seg = segment_from(1, SYNTH_EPOCH, &own_rows(37.6, 23.5, 10.0, 90.0));
    let far = segment_from(2, SYNTH_EPOCH, &own_rows(38.0, 24.5, 10.0, 270.0));
    let index = TrafficIndex::new(&[seg.clone(), far]);
    let (c, enc) = label_cri(&window_of(&seg), 18, &index, &CriWeights::default()).unwrap();
    assert_eq!(c, 0.0);
    assert!(enc.is_none());
}

#[test]
fn collision_course_is_high_risk() {
    // Head-on: own eastbound, target 0.5 NM ahead at step 17 heading west at 12 kn.
    let own = own_rows(37.6, 23.5, 12.0, 90.0);
    let at17 = own[17];
    let start_lon = at17[1] + (0.5 + 17.0 * 0.2) / (60.0 * at17[0].to_radians().cos());
    let target = own_rows(at17[0], start_lon, 12.0, 270.0);
    let a = segment_from(1, SYNTH_EPOCH, &own);
    let b = segment_from(2, SYNTH_EPOCH, &target);
    let index = TrafficIndex::new(&[a.clone(), b]);
    let (c, enc) = label_cri(&window_of(&a), 18, &index, &CriWeights::default()).unwrap();
    let enc = enc.unwrap();
    assert!((enc.range - 0.5).abs() < 0.01, "range {}", enc.range);
    assert!(c >= 0.9, "cri {c}");
}

#[test]
fn parallel_pair_matches_direct_cri() {
    let own = own_rows(37.6, 23.5, 11.0, 0.0);
    let beside = own_rows(37.6, 23.5 + 2.0 / (60.0 * 37.6f64.to_radians().cos()), 11.0, 0.0);
    let a = segment_from(1, SYNTH_EPOCH, &own);
    let b = segment_from(2, SYNTH_EPOCH, &beside);
    let index = TrafficIndex::new(&[a.clone(), b.clone()]);
    let w = CriWeights::default();
    let (c, _) = label_cri(&window_of(&a), 18, &index, &w).unwrap();
    let g = encounter_geometry(&a.records[17].state, &b.records[17].state);
    assert!((g.range - 2.0).abs() < 0.01);
    assert_eq!(c, cri(&g, &w));
}

fn straight_segments(n: usize, len: usize) -> Vec<VoyageSegment> {
    (0..n)
        .map(|i| segment_from(100 + i as u64, SYNTH_EPOCH + i as i64 * 86_400, &{
            let s = vec![10.0 + (i % 7) as f64; len];
            let c = vec![(i * 37 % 360) as f64; len];
            integrate_track((37.5 + (i % 10) as f64 * 0.04, 23.3 + (i % 13) as f64 * 0.03), &s, &c, 1.0)
                .unwrap()
                .into_iter()
                .zip(s.iter().zip(&c))
                .map(|((la, lo), (&s, &c))| [la, lo, s, c])
                .collect::<Vec<_>>()
        }))
        .collect()
}

#[test]
fn dataset_quota_is_exact() {
    // 100 segments of 51 points give 10 windows each.
    let segs = straight_segments(100, 51);
    let cfg = DatasetConfig::default();
    let d = build_labeled_dataset(&segs, &cfg).unwrap();
    assert_eq!(d.windows.len(), 1000);
    assert_eq!(d.windows.iter().filter(|w| w.anomaly_label == 1).count(), 300);
    for w in &d.windows {
        assert_eq!(w.anomaly_label == 1, w.anomaly_spec.is_some());
        assert!((0.0..=1.0).contains(&w.cri_target));
        assert!(!w.explanation.is_empty());
    }
    assert_eq!(d.train.len() + d.val.len(), 1000);

    let zero = build_labeled_dataset(&segs, &DatasetConfig { anomaly_ratio: 0.0, ..cfg.clone() }).unwrap();
    assert!(zero.windows.iter().all(|w| w.anomaly_label == 0));

    let again = build_labeled_dataset(&segs, &cfg).unwrap();
    assert_eq!(again, d);
}

#[test]
fn dataset_save_load_round_trip() {
    let segs = straight_segments(10, 44);
    let cfg = DatasetConfig::default();
    let d = build_labeled_dataset(&segs, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_dataset(dir.path(), &d, &cfg, None).unwrap();
    let back = load_dataset(dir.path()).unwrap();
    assert_eq!(back.config().unwrap(), cfg);
    assert_eq!(back.train.len(), d.train.len());
    for (lw, &i) in back.train.iter().zip(&d.train) {
        let orig = &d.windows[i];
        assert_eq!(lw.anomaly_spec, orig.anomaly_spec);
        assert_eq!(lw.cri_target, orig.cri_target);
        assert_eq!(lw.explanation, orig.explanation);
        for (a, b) in lw.window.rows.iter().zip(&orig.window.rows) {
            for v in 0..N_VARS {
                assert!((a[v] - b[v]).abs() < 1e-9);
            }
        }
    }
}

proptest! {
    #[test]
    fn injection_invariants(seed in any::<u64>(), cog in 0.0f64..360.0, sog in 5.0f64..20.0) {
        let w = straight_window(sog, cog);
        let b = bounds();
        let spec = AnomalySpec::sample(seed, 18, &b);
        prop_assert!(spec.end <= 18 && spec.start >= 1);
        let out = inject_anomaly(&w, &spec, &b).unwrap();
        prop_assert_eq!(&out.rows[..spec.start], &w.rows[..spec.start]);
        if spec.kind == AnomalyKind::Shift {
            prop_assert_eq!(&out.rows[spec.end..], &w.rows[spec.end..]);
        }
        let region = Region::default();
        for r in &out.rows {
            prop_assert!(region.contains(r[0], r[1], 1.0));
        }
    }
}
