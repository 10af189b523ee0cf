//! Rule-based explanation targets, prompts and situation briefings.

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::ais::{Window, N_VARS};
use crate::error::{Error, Result};
use crate::synth::{AnomalyKind, EncounterSummary};

/// Header shared by every prompt.
pub const PROMPT_HEADER: &str = "MARITIME TRAFFIC ANALYSIS";
pub const MAX_PROMPT_BYTES: usize = 2048;

/// Speed change (knots) between current and predicted state that counts as a trend.
pub const SPEED_TREND_KN: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RiskCategory {
    Low,
    Medium,
    High,
}

impl RiskCategory {
    pub fn of(cri: f64) -> Self {
        if cri < 0.33 {
            RiskCategory::Low
        } else if cri < 0.66 {
            RiskCategory::Medium
        } else {
            RiskCategory::High
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            RiskCategory::Low => "low",
            RiskCategory::Medium => "medium",
            RiskCategory::High => "high",
        }
    }

    fn phrase(self) -> &'static str {
        match self {
            RiskCategory::Low => "minimal collision risk",
            RiskCategory::Medium => "moderate collision risk",
            RiskCategory::High => "high collision risk detected",
        }
    }
}

pub fn fmt_lat(v: f64) -> String {
    format!("{:07.4}{}", v.abs(), if v < 0.0 { 'S' } else { 'N' })
}

pub fn fmt_lon(v: f64) -> String {
    format!("{:08.4}{}", v.abs(), if v < 0.0 { 'W' } else { 'E' })
}

pub fn fmt_speed(v: f64) -> String {
    format!("{:04.1}", v.clamp(0.0, 99.9))
}

pub fn fmt_course(v: f64) -> String {
    format!("{:05.1}", v.clamp(0.0, 360.0))
}

pub fn fmt_cri(v: f64) -> String {
    format!("{:.2}", v.clamp(0.0, 1.0))
}

fn fmt_pos(row: &[f64; N_VARS]) -> String {
    format!("({}, {})", fmt_lat(row[0]), fmt_lon(row[1]))
}

fn fmt_time(ts: i64) -> String {
    chrono::DateTime::from_timestamp(ts, 0)
        .map(|t| t.format("%Y-%m-%d %H:%M").to_string())
        .unwrap_or_else(|| ts.to_string())
}

/// Quantities the explanation and briefing are rendered from, in physical units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskOutputs {
    /// Last observed row (lat, lon, sog, cog).
    pub current: [f64; N_VARS],
    /// Last predicted row.
    pub predicted: [f64; N_VARS],
    pub anomaly_prob: f64,
    /// Present when the window is judged anomalous.
    pub anomaly_kind: Option<AnomalyKind>,
    pub cri: f64,
}

impl TaskOutputs {
    /// Outputs implied by the ground truth of a labelled window.
    pub fn reference(window: &Window, window_in: usize, anomaly: Option<AnomalyKind>, cri: f64) -> Self {
        Self {
            current: window.rows[window_in - 1],
            predicted: *window.rows.last().expect("windows are non-empty"),
            anomaly_prob: if anomaly.is_some() { 1.0 } else { 0.0 },
            anomaly_kind: anomaly,
            cri,
        }
    }
}

fn pattern_phrase(kind: Option<AnomalyKind>) -> &'static str {
    match kind {
        None => "normal navigation pattern",
        Some(AnomalyKind::Shift) => "abnormal position shift",
        Some(AnomalyKind::Heading) => "abnormal heading",
        Some(AnomalyKind::Speed) => "abnormal speed",
    }
}

fn speed_phrase(current: f64, predicted: f64) -> &'static str {
    let d = predicted - current;
    if d > SPEED_TREND_KN {
        "vessel is accelerating"
    } else if d < -SPEED_TREND_KN {
        "vessel is decelerating"
    } else {
        "vessel maintains steady speed"
    }
}

/// Explanation text. Every number comes first at a fixed offset, followed by
/// phrases from a closed bank.
pub fn explanation_from_outputs(o: &TaskOutputs) -> String {
    let anomaly = if o.anomaly_prob >= 0.5 { "high" } else { "low" };
    format!(
        "Vessel proceeding from {} at {} knots toward {} at {} knots with course adjustment from {} to {}, CRI {}. \
         Vessel shows {} and {}. Safety assessment reveals {} anomaly probability and {}.",
        fmt_pos(&o.current),
        fmt_speed(o.current[2]),
        fmt_pos(&o.predicted),
        fmt_speed(o.predicted[2]),
        fmt_course(o.current[3]),
        fmt_course(o.predicted[3]),
        fmt_cri(o.cri),
        pattern_phrase(o.anomaly_kind),
        speed_phrase(o.current[2], o.predicted[2]),
        anomaly,
        RiskCategory::of(o.cri).phrase(),
    )
}

/// Self-supervision target for a labelled window in physical units.
pub fn generate_target_explanation(window: &Window, window_in: usize, anomaly: Option<AnomalyKind>, cri: f64) -> String {
    explanation_from_outputs(&TaskOutputs::reference(window, window_in, anomaly, cri))
}

/// Decoder prompt built from task outputs. Fields appear in the same order as
/// the numbers of the explanation.
pub fn build_prompt(o: &TaskOutputs) -> String {
    let anomaly = match o.anomaly_kind {
        None => "NONE".to_string(),
        Some(k) => k.tag().to_ascii_uppercase(),
    };
    format!(
        "{PROMPT_HEADER}\nNOW {} {} KN\nPRED {} {} KN\nCOURSE {} TO {}\nCRI {} {}\nANOMALY {} P {}\n",
        fmt_pos(&o.current),
        fmt_speed(o.current[2]),
        fmt_pos(&o.predicted),
        fmt_speed(o.predicted[2]),
        fmt_course(o.current[3]),
        fmt_course(o.predicted[3]),
        fmt_cri(o.cri),
        RiskCategory::of(o.cri).label().to_ascii_uppercase(),
        anomaly,
        fmt_cri(o.anomaly_prob),
    )
}

/// Encoder prompt describing the observed window and the closest encounter.
/// It carries no target labels.
pub fn encoder_prompt(input: &[[f64; N_VARS]], encounter: Option<&EncounterSummary>) -> String {
    let last = input.last().expect("non-empty input");
    let contact = match encounter {
        None => "CONTACT NONE".to_string(),
        Some(e) => format!(
            "CONTACT R {:05.2} NM B {:03.0} DCPA {:05.2} NM TCPA {:+06.1} MIN SR {:04.2}",
            e.range.min(99.99),
            e.rel_bearing.round().rem_euclid(360.0),
            e.dcpa.min(99.99),
            e.tcpa.clamp(-999.9, 999.9),
            e.speed_ratio.min(9.99),
        ),
    };
    format!(
        "{PROMPT_HEADER}\nNOW {} {} KN {} DEG\n{contact}\n",
        fmt_pos(last),
        fmt_speed(last[2]),
        fmt_course(last[3]),
    )
}

/// Slots of the situation briefing.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SituationSummary {
    pub mmsi: Option<u64>,
    /// Start and end of the observed window, seconds.
    pub time_range: Option<(i64, i64)>,
    pub current: Option<[f64; N_VARS]>,
    pub predicted: Option<[f64; N_VARS]>,
    pub confidence: Option<String>,
    pub anomalous: Option<bool>,
    pub anomaly_kind: Option<AnomalyKind>,
    /// Time of the first anomalous step, seconds.
    pub anomaly_time: Option<i64>,
    pub cri: Option<f64>,
    pub target_mmsi: Option<u64>,
}

/// Confidence bucket from a validation ADE in nautical miles.
pub fn confidence_from_ade(ade_nm: f64) -> &'static str {
    if ade_nm < 0.5 {
        "high confidence"
    } else if ade_nm < 1.5 {
        "moderate confidence"
    } else {
        "low confidence"
    }
}

/// Fills the briefing template and its sub-templates.
pub fn render_briefing(s: &SituationSummary) -> Result<String> {
    let mmsi = s.mmsi.ok_or(Error::MissingSlot("MMSI"))?;
    let (t0, t1) = s.time_range.ok_or(Error::MissingSlot("time_range"))?;
    let cur = s.current.ok_or(Error::MissingSlot("current"))?;
    let pred = s.predicted.ok_or(Error::MissingSlot("future_movement"))?;
    let confidence = s.confidence.as_deref().ok_or(Error::MissingSlot("confidence_level"))?;
    let anomalous = s.anomalous.ok_or(Error::MissingSlot("normal/abnormal"))?;
    let cri = s.cri.ok_or(Error::MissingSlot("risk_level"))?;
    let category = RiskCategory::of(cri);

    let pattern = format!(
        "{} at {} knots on course {}",
        if anomalous { "irregular movement" } else { "regular movement" },
        fmt_speed(cur[2]),
        fmt_course(cur[3]),
    );
    let future = format!(
        "the vessel will proceed to coordinates [{}, {}] at {} knots",
        fmt_lat(pred[0]),
        fmt_lon(pred[1]),
        fmt_speed(pred[2]),
    );
    let anomaly = if anomalous {
        let kind = s.anomaly_kind.ok_or(Error::MissingSlot("behavior_type"))?;
        let at = s.anomaly_time.ok_or(Error::MissingSlot("timestamp"))?;
        format!("abnormal behavior detected; unusual {} detected at {}", kind.behavior(), fmt_time(at))
    } else {
        "normal behavior detected".to_string()
    };
    let target = s
        .target_mmsi
        .map_or_else(|| "none".to_string(), |m| m.to_string());
    Ok(format!(
        "Based on AIS data analysis from {} to {}, vessel {mmsi} shows {pattern}. \
         Trajectory prediction indicates {future} with {confidence}. \
         Anomaly assessment: {anomaly}. \
         Collision risk: {} with nearby vessels; CRI of {} indicates {} risk with vessel {target}.",
        fmt_time(t0),
        fmt_time(t1),
        category.label(),
        fmt_cri(cri),
        category.label(),
    ))
}

/// Numeric slots recovered from a rendered briefing.
#[derive(Clone, Debug, PartialEq)]
pub struct ParsedBriefing {
    pub mmsi: u64,
    pub speed: f64,
    pub course: f64,
    pub pred_lat: f64,
    pub pred_lon: f64,
    pub pred_speed: f64,
    pub cri: f64,
    pub risk: String,
}

fn signed(v: &str, hemi: &str) -> f64 {
    let x: f64 = v.parse().expect("regex matched digits");
    if hemi == "S" || hemi == "W" {
        -x
    } else {
        x
    }
}

pub fn parse_briefing(text: &str) -> Option<ParsedBriefing> {
    let re = Regex::new(
        r"vessel (\d+) shows \w+ movement at (\d+\.\d) knots on course (\d+\.\d)\. .*coordinates \[(\d+\.\d{4})([NS]), (\d+\.\d{4})([EW])\] at (\d+\.\d) knots.*Collision risk: (\w+) with nearby vessels; CRI of (\d\.\d{2})",
    )
    .expect("static regex");
    let c = re.captures(text)?;
    Some(ParsedBriefing {
        mmsi: c[1].parse().ok()?,
        speed: c[2].parse().ok()?,
        course: c[3].parse().ok()?,
        pred_lat: signed(&c[4], &c[5]),
        pred_lon: signed(&c[6], &c[7]),
        pred_speed: c[8].parse().ok()?,
        risk: c[9].to_string(),
        cri: c[10].parse().ok()?,
    })
}

/// GeoJSON FeatureCollection with history, truth and prediction tracks.
pub fn tracks_geojson(history: &[[f64; N_VARS]], truth: &[[f64; N_VARS]], prediction: &[[f64; N_VARS]]) -> serde_json::Value {
    let line = |role: &str, rows: &[[f64; N_VARS]]| {
        serde_json::json!({
            "type": "Feature",
            "properties": { "role": role },
            "geometry": {
                "type": "LineString",
                "coordinates": rows.iter().map(|r| [r[1], r[0]]).collect::<Vec<_>>(),
            }
        })
    };
    serde_json::json!({
        "type": "FeatureCollection",
        "features": [
            line("history", history),
            line("truth", truth),
            line("prediction", prediction),
        ]
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixed_width_numbers() {
        assert_eq!(fmt_lat(37.56654), "37.5665N");
        assert_eq!(fmt_lat(-7.5), "07.5000S");
        assert_eq!(fmt_lon(23.648), "023.6480E");
        assert_eq!(fmt_speed(9.06), "09.1");
        assert_eq!(fmt_course(45.0), "045.0");
        assert_eq!(fmt_cri(0.123), "0.12");
    }

    #[test]
    fn risk_thresholds() {
        assert_eq!(RiskCategory::of(0.0), RiskCategory::Low);
        assert_eq!(RiskCategory::of(0.33), RiskCategory::Medium);
        assert_eq!(RiskCategory::of(0.66), RiskCategory::High);
    }
}
