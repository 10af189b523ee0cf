use aisllm_core::ais::Window;
use aisllm_core::briefing::*;
use aisllm_core::synth::{build_labeled_dataset, generate_synthetic_traffic, AnomalyKind, DatasetConfig, SynthConfig};
use aisllm_core::Error;
use proptest::prelude::*;

fn window() -> Window {
    Window {
        mmsi: 237_000_001,
        start_ts: 1_704_067_200,
        interval_s: 60,
        rows: (0..42)
            .map(|i| [37.9 + i as f64 * 1e-3, 23.6 + i as f64 * 2e-3, 12.0, 62.5])
            .collect(),
    }
}

fn summary(cri: f64) -> SituationSummary {
    SituationSummary {
        mmsi: Some(237_000_001),
        time_range: Some((1_704_067_200, 1_704_068_220)),
        current: Some([37.9421, 23.6310, 12.3, 62.5]),
        predicted: Some([37.9610, 23.6712, 12.8, 64.0]),
        confidence: Some(confidence_from_ade(0.3).to_string()),
        anomalous: Some(false),
        anomaly_kind: None,
        anomaly_time: None,
        cri: Some(cri),
        target_mmsi: Some(237_000_002),
    }
}

#[test]
fn normal_low_risk_explanation() {
    let text = generate_target_explanation(&window(), 18, None, 0.05);
    assert!(text.contains("normal navigation pattern"), "{text}");
    assert!(text.contains("minimal collision risk"), "{text}");
    assert!(text.contains("(37.9170N, 023.6340E)"), "{text}");
    assert_eq!(text, generate_target_explanation(&window(), 18, None, 0.05));
}

#[test]
fn heading_anomaly_explanation() {
    let text = generate_target_explanation(&window(), 18, Some(AnomalyKind::Heading), 0.5);
    assert!(text.contains("abnormal heading"), "{text}");
    assert!(text.contains("moderate collision risk"), "{text}");
    assert!(text.contains("high anomaly probability"), "{text}");
}

#[test]
fn prompt_header_and_determinism() {
    let o = TaskOutputs::reference(&window(), 18, Some(AnomalyKind::Speed), 0.7);
    let p = build_prompt(&o);
    assert!(p.starts_with("MARITIME TRAFFIC ANALYSIS"));
    assert!(p.contains("ANOMALY SPEED P 1.00"));
    assert!(p.contains("CRI 0.70 HIGH"));
    assert_eq!(p, build_prompt(&o));
    let e = encoder_prompt(&window().rows[..18], None);
    assert!(e.starts_with("MARITIME TRAFFIC ANALYSIS"));
    assert!(e.ends_with("CONTACT NONE\n"));
}

#[test]
fn prompts_fit_for_generated_traffic() {
    let traffic = generate_synthetic_traffic(&SynthConfig {
        n_segments: 80,
        ..SynthConfig::default()
    })
    .unwrap();
    let data = build_labeled_dataset(&traffic.segments, &DatasetConfig::default()).unwrap();
    let mut longest = 0;
    for lw in &data.windows {
        let o = TaskOutputs::reference(&lw.window, 18, lw.anomaly_kind(), lw.cri_target);
        longest = longest
            .max(build_prompt(&o).len())
            .max(encoder_prompt(&lw.window.rows[..18], lw.encounter.as_ref()).len())
            .max(lw.explanation.len());
    }
    assert!(longest <= MAX_PROMPT_BYTES, "{longest}");
}

#[test]
fn risk_buckets() {
    let high = render_briefing(&summary(0.70)).unwrap();
    assert!(high.contains("CRI of 0.70 indicates high risk"), "{high}");
    let low = render_briefing(&summary(0.0)).unwrap();
    assert!(low.contains("indicates low risk"));
    assert!(low.starts_with("Based on AIS data analysis from 2024-01-01 00:00 to 2024-01-01 00:17"));
    assert_eq!(RiskCategory::of(0.33), RiskCategory::Medium);
    assert_eq!(RiskCategory::of(0.6599), RiskCategory::Medium);
    assert_eq!(RiskCategory::of(0.66), RiskCategory::High);
}

#[test]
fn anomaly_sub_template() {
    let mut s = summary(0.2);
    s.anomalous = Some(true);
    assert!(matches!(render_briefing(&s), Err(Error::MissingSlot("behavior_type"))));
    s.anomaly_kind = Some(AnomalyKind::Speed);
    s.anomaly_time = Some(1_704_067_500);
    let text = render_briefing(&s).unwrap();
    assert!(text.contains("unusual speed change detected at 2024-01-01 00:05"), "{text}");
    assert!(text.contains("irregular movement"));
}

#[test]
fn missing_slot_is_reported() {
    let mut s = summary(0.1);
    s.cri = None;
    assert!(matches!(render_briefing(&s), Err(Error::MissingSlot("risk_level"))));
    assert!(matches!(render_briefing(&SituationSummary::default()), Err(Error::MissingSlot("MMSI"))));
}

#[test]
fn geojson_has_three_tracks() {
    let w = window();
    let g = tracks_geojson(&w.rows[..18], &w.rows[18..], &w.rows[18..]);
    assert_eq!(g["type"], "FeatureCollection");
    let f = g["features"].as_array().unwrap();
    let roles: Vec<&str> = f.iter().map(|x| x["properties"]["role"].as_str().unwrap()).collect();
    assert_eq!(roles, ["history", "truth", "prediction"]);
    for x in f {
        assert_eq!(x["geometry"]["type"], "LineString");
        let c = x["geometry"]["coordinates"].as_array().unwrap();
        assert!(c.len() >= 2);
        // Longitude first.
        assert_eq!(c[0][0].as_f64().unwrap(), w.rows[if x["properties"]["role"] == "history" { 0 } else { 18 }][1]);
    }
}

proptest! {
    #[test]
    fn rendered_briefings_parse_back(
        lat in -89.0f64..89.0, lon in -179.0f64..179.0,
        plat in -89.0f64..89.0, plon in -179.0f64..179.0,
        sog in 0.0f64..40.0, psog in 0.0f64..40.0, cog in 0.0f64..360.0,
        cri in 0.0f64..1.0, mmsi in 1u64..999_999_999,
    ) {
        let s = SituationSummary {
            mmsi: Some(mmsi),
            current: Some([lat, lon, sog, cog]),
            predicted: Some([plat, plon, psog, cog]),
            cri: Some(cri),
            ..summary(0.0)
        };
        let text = render_briefing(&s).unwrap();
        let p = parse_briefing(&text).unwrap();
        prop_assert_eq!(p.mmsi, mmsi);
        prop_assert_eq!(fmt_speed(p.speed), fmt_speed(sog));
        prop_assert_eq!(fmt_course(p.course), fmt_course(cog));
        prop_assert_eq!(fmt_lat(p.pred_lat), fmt_lat(plat));
        prop_assert_eq!(fmt_lon(p.pred_lon), fmt_lon(plon));
        prop_assert_eq!(fmt_speed(p.pred_speed), fmt_speed(psog));
        prop_assert_eq!(fmt_cri(p.cri), fmt_cri(cri));
        prop_assert_eq!(p.risk.as_str(), RiskCategory::of(cri).label());
    }
}
