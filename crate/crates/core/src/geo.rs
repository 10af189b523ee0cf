//! Spherical geodesy and vessel-pair kinematics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mean earth radius in nautical miles.
pub const EARTH_RADIUS_NM: f64 = 3440.065;

/// Floor on own-ship speed when forming the speed ratio, knots.
pub const SPEED_RATIO_EPS: f64 = 0.1;

/// Relative speeds below this (knots) are treated as a stationary pair.
pub const STATIONARY_KN: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    lat: f64,
    lon: f64,
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64) -> Result<Self> {
        if !lat.is_finite() || !lon.is_finite() || lat.abs() > 90.0 || lon.abs() > 180.0 {
            return Err(Error::InvalidCoordinate { lat, lon });
        }
        Ok(Self { lat, lon })
    }

    pub fn lat(&self) -> f64 {
        self.lat
    }

    pub fn lon(&self) -> f64 {
        self.lon
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KinematicState {
    pub position: GeoPoint,
    sog: f64,
    cog: f64,
}

/// Wraps an angle in degrees into `[0, 360)`.
pub fn normalize_deg(deg: f64) -> f64 {
    let d = deg.rem_euclid(360.0);
    // rem_euclid can round up to exactly 360 for tiny negative inputs
    if d >= 360.0 {
        0.0
    } else {
        d
    }
}

/// Signed smallest rotation from `from` to `to`, in `(-180, 180]`.
pub fn angle_diff_deg(from: f64, to: f64) -> f64 {
    let d = normalize_deg(to - from);
    if d > 180.0 {
        d - 360.0
    } else {
        d
    }
}

impl KinematicState {
    pub fn new(position: GeoPoint, sog: f64, cog: f64) -> Result<Self> {
        if !sog.is_finite() || sog < 0.0 {
            return Err(Error::InvalidState(format!("sog {sog}")));
        }
        if !cog.is_finite() {
            return Err(Error::InvalidState(format!("cog {cog}")));
        }
        Ok(Self {
            position,
            sog,
            cog: normalize_deg(cog),
        })
    }

    pub fn sog(&self) -> f64 {
        self.sog
    }

    pub fn cog(&self) -> f64 {
        self.cog
    }

    /// Velocity (east, north) in knots.
    pub fn velocity(&self) -> (f64, f64) {
        let c = self.cog.to_radians();
        (self.sog * c.sin(), self.sog * c.cos())
    }
}

/// Great-circle distance in nautical miles.
pub fn haversine_nm(a: GeoPoint, b: GeoPoint) -> f64 {
    let (p1, p2) = (a.lat.to_radians(), b.lat.to_radians());
    let dp = p2 - p1;
    let dl = (b.lon - a.lon).to_radians();
    let h = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_NM * h.sqrt().min(1.0).asin()
}

/// Forward azimuth from `a` to `b`, degrees in `[0, 360)`.
pub fn initial_bearing(a: GeoPoint, b: GeoPoint) -> Result<f64> {
    if a == b {
        return Err(Error::CoincidentPoints);
    }
    let (p1, p2) = (a.lat.to_radians(), b.lat.to_radians());
    let dl = (b.lon - a.lon).to_radians();
    let y = dl.sin() * p2.cos();
    let x = p1.cos() * p2.sin() - p1.sin() * p2.cos() * dl.cos();
    Ok(normalize_deg(y.atan2(x).to_degrees()))
}

/// Offset of `p` from `origin` in a local equirectangular plane, (east, north) NM.
pub fn local_offset_nm(origin: GeoPoint, p: GeoPoint) -> (f64, f64) {
    let dlon = angle_diff_deg(origin.lon, p.lon);
    let east = dlon * origin.lat.to_radians().cos() * 60.0;
    let north = (p.lat - origin.lat) * 60.0;
    (east, north)
}

/// Advances a position by a speed and course over `minutes` using the local
/// plane at the starting point.
pub fn dead_reckon(from: GeoPoint, sog: f64, cog: f64, minutes: f64) -> (f64, f64) {
    let dist = sog * minutes / 60.0;
    let c = cog.to_radians();
    let dlat = dist * c.cos() / 60.0;
    let dlon = dist * c.sin() / (60.0 * from.lat.to_radians().cos());
    (from.lat + dlat, from.lon + dlon)
}

/// Distance in NM from `p` to the segment `a`–`b`, measured in the local plane at `p`.
pub fn point_segment_distance_nm(p: GeoPoint, a: GeoPoint, b: GeoPoint) -> f64 {
    let (ax, ay) = local_offset_nm(p, a);
    let (bx, by) = local_offset_nm(p, b);
    let (dx, dy) = (bx - ax, by - ay);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (-(ax * dx + ay * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (cx, cy) = (ax + t * dx, ay + t * dy);
    (cx * cx + cy * cy).sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncounterGeometry {
    /// Target relative to own, (east, north) NM.
    pub rel_pos: (f64, f64),
    /// Target velocity minus own velocity, (east, north) knots.
    pub rel_vel: (f64, f64),
    pub range: f64,
    /// Bearing of the target relative to own heading, degrees in `[0, 360)`.
    /// Coincident vessels are reported dead ahead.
    pub rel_bearing: f64,
    pub speed_ratio: f64,
}

pub fn encounter_geometry(own: &KinematicState, target: &KinematicState) -> EncounterGeometry {
    let rel_pos = local_offset_nm(own.position, target.position);
    let (ove, ovn) = own.velocity();
    let (tve, tvn) = target.velocity();
    let rel_vel = (tve - ove, tvn - ovn);
    let range = rel_pos.0.hypot(rel_pos.1);
    let rel_bearing = if range > 0.0 {
        normalize_deg(rel_pos.0.atan2(rel_pos.1).to_degrees() - own.cog)
    } else {
        0.0
    };
    EncounterGeometry {
        rel_pos,
        rel_vel,
        range,
        rel_bearing,
        speed_ratio: target.sog / own.sog.max(SPEED_RATIO_EPS),
    }
}

/// Distance (NM) and time (minutes) to the closest point of approach.
pub fn dcpa_tcpa(g: &EncounterGeometry) -> (f64, f64) {
    let (px, py) = g.rel_pos;
    let (vx, vy) = g.rel_vel;
    let v2 = vx * vx + vy * vy;
    if v2.sqrt() < STATIONARY_KN {
        return (g.range, 0.0);
    }
    let t_h = -(px * vx + py * vy) / v2;
    let dcpa = (px + vx * t_h).hypot(py + vy * t_h);
    (dcpa, t_h * 60.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriWeights {
    pub w_dcpa: f64,
    pub w_tcpa: f64,
    pub w_range: f64,
    pub w_bearing: f64,
    pub w_speed: f64,
    /// Safe passing distance, NM.
    pub d_safe: f64,
    /// Look-ahead horizon, minutes.
    pub t_horizon: f64,
}

impl Default for CriWeights {
    fn default() -> Self {
        Self {
            w_dcpa: 0.40,
            w_tcpa: 0.30,
            w_range: 0.15,
            w_bearing: 0.10,
            w_speed: 0.05,
            d_safe: 0.5,
            t_horizon: 30.0,
        }
    }
}

impl CriWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.w_dcpa, self.w_tcpa, self.w_range, self.w_bearing, self.w_speed];
        if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config(format!("negative CRI weight in {w:?}")));
        }
        if (w.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("CRI weights {w:?} do not sum to 1")));
        }
        if !(self.d_safe > 0.0 && self.t_horizon > 0.0) {
            return Err(Error::Config("d_safe and t_horizon must be positive".into()));
        }
        Ok(())
    }
}

/// Bearing (degrees) at which the bearing membership peaks.
pub const BEARING_PEAK_DEG: f64 = 19.0;

/// Individual memberships `(dcpa, tcpa, range, bearing, speed)`, each in `[0, 1]`.
pub fn cri_memberships(g: &EncounterGeometry, w: &CriWeights) -> [f64; 5] {
    let (dcpa, tcpa) = dcpa_tcpa(g);
    // A diverging pair only grows further apart, so the current range is
    // the closest it will ever be.
    let d_eff = if tcpa < 0.0 { g.range } else { dcpa };
    let u_dcpa = (-(d_eff / w.d_safe).powi(2)).exp();
    let u_tcpa = if tcpa < 0.0 {
        0.0
    } else {
        (1.0 - tcpa / w.t_horizon).clamp(0.0, 1.0)
    };
    let u_range = (-(g.range / (4.0 * w.d_safe)).powi(2)).exp();
    let u_bearing = (1.0 + (g.rel_bearing - BEARING_PEAK_DEG).to_radians().cos()) / 2.0;
    let u_speed = g.speed_ratio / (1.0 + g.speed_ratio);
    [u_dcpa, u_tcpa, u_range, u_bearing, u_speed]
}

/// Collision Risk Index in `[0, 1]`.
pub fn cri(g: &EncounterGeometry, w: &CriWeights) -> f64 {
    let u = cri_memberships(g, w);
    let ws = [w.w_dcpa, w.w_tcpa, w.w_range, w.w_bearing, w.w_speed];
    ws.iter().zip(u).map(|(a, b)| a * b).sum::<f64>().clamp(0.0, 1.0)
}
