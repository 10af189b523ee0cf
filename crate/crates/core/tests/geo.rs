use aisllm_core::geo::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn p(lat: f64, lon: f64) -> GeoPoint {
    GeoPoint::new(lat, lon).unwrap()
}

fn state(lat: f64, lon: f64, sog: f64, cog: f64) -> KinematicState {
    KinematicState::new(p(lat, lon), sog, cog).unwrap()
}

// Spherical law of cosines, independent of the haversine form.
fn cosine_law_nm(a: GeoPoint, b: GeoPoint) -> f64 {
    let (p1, p2) = (a.lat().to_radians(), b.lat().to_radians());
    let dl = (b.lon() - a.lon()).to_radians();
    let c = p1.sin() * p2.sin() + p1.cos() * p2.cos() * dl.cos();
    EARTH_RADIUS_NM * c.clamp(-1.0, 1.0).acos()
}

fn unit(lat: f64, lon: f64) -> [f64; 3] {
    let (la, lo) = (lat.to_radians(), lon.to_radians());
    [la.cos() * lo.cos(), la.cos() * lo.sin(), la.sin()]
}

// Heading of a very short step along the great circle, read off in the
// local plane at the start point.
fn geodesic_walk_bearing(a: GeoPoint, b: GeoPoint) -> f64 {
    let (u, v) = (unit(a.lat(), a.lon()), unit(b.lat(), b.lon()));
    let omega = (u[0] * v[0] + u[1] * v[1] + u[2] * v[2]).acos();
    let t = 1e-6;
    let (s0, s1) = (((1.0 - t) * omega).sin() / omega.sin(), (t * omega).sin() / omega.sin());
    let w: Vec<f64> = (0..3).map(|i| s0 * u[i] + s1 * v[i]).collect();
    let lat = w[2].asin().to_degrees();
    let lon = w[1].atan2(w[0]).to_degrees();
    let east = (lon - a.lon()) * a.lat().to_radians().cos();
    let north = lat - a.lat();
    east.atan2(north).to_degrees().rem_euclid(360.0)
}

#[test]
fn haversine_examples() {
    assert_eq!(haversine_nm(p(37.5, 23.1), p(37.5, 23.1)), 0.0);
    assert!((haversine_nm(p(0.0, 0.0), p(1.0, 0.0)) - 60.0).abs() < 0.05);
    let (a, b) = (p(37.5, 23.1), p(37.9, 23.7));
    assert!((haversine_nm(a, b) - cosine_law_nm(a, b)).abs() < 1e-6);
}

#[test]
fn bearing_examples() {
    assert_eq!(initial_bearing(p(0.0, 0.0), p(1.0, 0.0)).unwrap(), 0.0);
    assert!((initial_bearing(p(0.0, 0.0), p(0.0, 1.0)).unwrap() - 90.0).abs() < 1e-12);
    let (a, b) = (p(37.5, 23.1), p(37.9, 23.7));
    let oracle = geodesic_walk_bearing(a, b);
    assert!((initial_bearing(a, b).unwrap() - oracle).abs() < 0.01, "oracle {oracle}");
    assert!(initial_bearing(a, a).is_err());
}

#[test]
fn encounter_examples() {
    let g = encounter_geometry(&state(37.5, 23.0, 12.0, 45.0), &state(37.5, 23.0, 12.0, 45.0));
    assert_eq!((g.rel_pos, g.rel_vel, g.range), ((0.0, 0.0), (0.0, 0.0), 0.0));

    let g = encounter_geometry(&state(10.0, 20.0, 0.0, 0.0), &state(11.0, 20.0, 0.0, 0.0));
    assert!(g.rel_pos.0.abs() < 1e-9 && (g.rel_pos.1 - 60.0).abs() < 1e-9);
    assert!(g.rel_bearing.abs() < 1e-9);

    let g = encounter_geometry(&state(0.0, 0.0, 10.0, 90.0), &state(0.0, 0.1, 10.0, 270.0));
    assert!((g.rel_vel.0 + 20.0).abs() < 1e-9 && g.rel_vel.1.abs() < 1e-9);
    assert!((g.range - g.rel_pos.0.hypot(g.rel_pos.1)).abs() < 1e-9);
}

#[test]
fn cpa_examples() {
    // head-on on the same meridian
    let g = encounter_geometry(&state(37.0, 23.0, 10.0, 0.0), &state(37.1, 23.0, 8.0, 180.0));
    let (dcpa, tcpa) = dcpa_tcpa(&g);
    assert!(dcpa < 1e-9, "{dcpa}");
    assert!((tcpa - 6.0 / 18.0 * 60.0).abs() < 1e-6);

    let g = encounter_geometry(&state(37.0, 23.0, 10.0, 30.0), &state(37.05, 23.1, 10.0, 30.0));
    let (dcpa, tcpa) = dcpa_tcpa(&g);
    assert_eq!(tcpa, 0.0);
    assert_eq!(dcpa, g.range);
}

// Both tracks advanced in the local plane at 0.1 s steps.
fn simulated_cpa(own: &KinematicState, target: &KinematicState, horizon_min: f64) -> (f64, f64) {
    let g = encounter_geometry(own, target);
    let vel = |s: &KinematicState| {
        let c = s.cog().to_radians();
        (s.sog() * c.sin(), s.sog() * c.cos())
    };
    let (oe, on) = vel(own);
    let (te, tn) = vel(target);
    let steps = (horizon_min * 600.0) as i64;
    let mut best = (f64::INFINITY, 0.0);
    for k in -steps..=steps {
        let h = k as f64 / 36_000.0;
        let dx = g.rel_pos.0 + te * h - oe * h;
        let dy = g.rel_pos.1 + tn * h - on * h;
        let d = dx.hypot(dy);
        if d < best.0 {
            best = (d, h * 60.0);
        }
    }
    best
}

pub fn random_encounter(rng: &mut ChaCha8Rng) -> (KinematicState, KinematicState) {
    let own = state(
        rng.gen_range(30.0..45.0),
        rng.gen_range(-10.0..30.0),
        rng.gen_range(0.5..25.0),
        rng.gen_range(0.0..360.0),
    );
    // target within ~6 NM so the CPA falls inside a 30-minute window
    let target = state(
        own.position.lat() + rng.gen_range(-0.1..0.1),
        own.position.lon() + rng.gen_range(-0.1..0.1),
        rng.gen_range(0.5..25.0),
        rng.gen_range(0.0..360.0),
    );
    (own, target)
}

#[test]
fn cpa_matches_time_stepped_simulation() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut checked = 0;
    while checked < 1000 {
        let (own, target) = random_encounter(&mut rng);
        let (dcpa, tcpa) = dcpa_tcpa(&encounter_geometry(&own, &target));
        if tcpa.abs() > 29.0 {
            continue;
        }
        let (sim_d, sim_t) = simulated_cpa(&own, &target, 30.0);
        assert!((dcpa - sim_d).abs() < 1e-3, "dcpa {dcpa} vs {sim_d}");
        assert!((tcpa - sim_t).abs() < 0.05, "tcpa {tcpa} vs {sim_t}");
        checked += 1;
    }
}

#[test]
fn cri_examples() {
    let w = CriWeights::default();
    let g = encounter_geometry(&state(37.0, 23.0, 10.0, 0.0), &state(37.0, 23.0, 10.0, 180.0));
    assert!(cri(&g, &w) >= 0.95, "{}", cri(&g, &w));

    // 25 NM astern, slow and opening
    let own = state(37.0, 23.0, 10.0, 0.0);
    let target = state(37.0 - 25.0 / 60.0, 23.0, 0.5, 180.0);
    let g = encounter_geometry(&own, &target);
    assert!((g.range - 50.0 * w.d_safe).abs() < 1e-6);
    assert!(dcpa_tcpa(&g).1 < 0.0);
    assert!(cri(&g, &w) <= 0.1 * (w.w_bearing + w.w_speed) + 0.05);
}

#[test]
fn cri_matches_formula_recomputation() {
    let w = CriWeights::default();
    let own = state(37.6, 23.4, 12.0, 90.0);
    let target = state(37.62, 23.43, 9.0, 200.0);
    let g = encounter_geometry(&own, &target);

    let (px, py) = g.rel_pos;
    let (vx, vy) = g.rel_vel;
    let t_h = -(px * vx + py * vy) / (vx * vx + vy * vy);
    assert!(t_h > 0.0);
    let dcpa = ((px + vx * t_h).powi(2) + (py + vy * t_h).powi(2)).sqrt();
    let tcpa = t_h * 60.0;
    let range = (px * px + py * py).sqrt();
    let bearing = (px.atan2(py).to_degrees() - 90.0).rem_euclid(360.0);
    let sr = 9.0 / 12.0;
    let expected = 0.40 * (-(dcpa / 0.5f64).powi(2)).exp()
        + 0.30 * (1.0 - tcpa / 30.0).clamp(0.0, 1.0)
        + 0.15 * (-(range / 2.0f64).powi(2)).exp()
        + 0.10 * (1.0 + ((bearing - 19.0) * std::f64::consts::PI / 180.0).cos()) / 2.0
        + 0.05 * sr / (1.0 + sr);
    assert!((cri(&g, &w) - expected).abs() < 1e-9);
}

#[test]
fn cri_weights_validate() {
    assert!(CriWeights::default().validate().is_ok());
    assert!(CriWeights { w_dcpa: 0.5, ..Default::default() }.validate().is_err());
    assert!(CriWeights { d_safe: 0.0, ..Default::default() }.validate().is_err());
}

// Geometry with prescribed range, dcpa and tcpa (hours); other fields fixed.
fn geometry(range: f64, dcpa: f64, t_h: f64) -> EncounterGeometry {
    let along = (range * range - dcpa * dcpa).sqrt();
    let v = along / t_h;
    EncounterGeometry {
        rel_pos: (dcpa, along),
        rel_vel: (0.0, -v),
        range,
        rel_bearing: 30.0,
        speed_ratio: 0.8,
    }
}

fn point() -> impl Strategy<Value = GeoPoint> {
    (-80.0f64..80.0, -179.0f64..179.0).prop_map(|(a, b)| p(a, b))
}

proptest! {
    #[test]
    fn haversine_symmetric_and_triangular(a in point(), b in point(), c in point()) {
        prop_assert_eq!(haversine_nm(a, b), haversine_nm(b, a));
        prop_assert!(haversine_nm(a, b) >= 0.0);
        prop_assert!(haversine_nm(a, c) <= haversine_nm(a, b) + haversine_nm(b, c) + 1e-6);
    }

    #[test]
    fn dcpa_bounded_by_range(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (own, target) = random_encounter(&mut rng);
        let g = encounter_geometry(&own, &target);
        let (dcpa, _) = dcpa_tcpa(&g);
        prop_assert!(dcpa <= g.range + 1e-12);
        let c = cri(&g, &CriWeights::default());
        prop_assert!((0.0..=1.0).contains(&c));
    }

    #[test]
    fn dcpa_equals_range_when_perpendicular(range in 0.1f64..10.0, speed in 0.1f64..30.0) {
        let g = EncounterGeometry { rel_pos: (0.0, range), rel_vel: (speed, 0.0), range, rel_bearing: 0.0, speed_ratio: 1.0 };
        let (dcpa, tcpa) = dcpa_tcpa(&g);
        prop_assert!((dcpa - range).abs() < 1e-12);
        prop_assert!(tcpa.abs() < 1e-12);
    }

    #[test]
    fn cri_non_increasing_in_dcpa_and_tcpa(range in 1.0f64..8.0, d1 in 0.0f64..1.0, d2 in 0.0f64..1.0, t1 in 0.01f64..1.0, t2 in 0.01f64..1.0) {
        let w = CriWeights::default();
        let (dlo, dhi) = (d1.min(d2) * range * 0.99, d1.max(d2) * range * 0.99);
        prop_assert!(cri(&geometry(range, dhi, t1), &w) <= cri(&geometry(range, dlo, t1), &w) + 1e-12);
        let (tlo, thi) = (t1.min(t2), t1.max(t2));
        prop_assert!(cri(&geometry(range, dlo, thi), &w) <= cri(&geometry(range, dlo, tlo), &w) + 1e-12);
    }
}
