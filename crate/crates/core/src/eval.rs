//! Trajectory, classification and text metrics, the dead-reckoning
//! baseline and the evaluation report.

use std::collections::HashMap;

use diffcore::{Scalar, Tape};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ais::{NormalizationStats, N_VARS};
use crate::briefing::{build_prompt, TaskOutputs};
use crate::error::{Error, Result};
use crate::geo::{angle_diff_deg, dead_reckon, haversine_nm, GeoPoint};
use crate::model::{detokenize, Mode, Model, SampleInput};
use crate::synth::AnomalyKind;
use crate::training::{sample_eval, Sample};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryMetrics {
    pub ade: f64,
    pub fde: f64,
    pub mse: f64,
    pub mae: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
    /// Set when precision or recall had a zero denominator.
    pub zero_division: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TextMetrics {
    pub bleu4: f64,
    pub rouge_l: f64,
    pub bertscore: String,
    pub samples: usize,
}

/// Per-step great-circle error between (lat, lon) tracks; returns (ADE, FDE) in NM.
pub fn ade_fde(pred: &[(f64, f64)], truth: &[(f64, f64)]) -> Result<(f64, f64)> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::ShapeMismatch(vec![pred.len(), 2], vec![truth.len(), 2]));
    }
    let mut errs = Vec::with_capacity(pred.len());
    for (p, t) in pred.iter().zip(truth) {
        errs.push(haversine_nm(GeoPoint::new(p.0, p.1)?, GeoPoint::new(t.0, t.1)?));
    }
    let ade = errs.iter().sum::<f64>() / errs.len() as f64;
    Ok((ade, *errs.last().expect("non-empty")))
}

pub fn mse_mae(pred: &[f64], target: &[f64]) -> Result<(f64, f64)> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::ShapeMismatch(vec![pred.len()], vec![target.len()]));
    }
    let n = pred.len() as f64;
    let (mut se, mut ae) = (0.0, 0.0);
    for (p, t) in pred.iter().zip(target) {
        se += (p - t) * (p - t);
        ae += (p - t).abs();
    }
    Ok((se / n, ae / n))
}

/// Anomaly is the positive class.
pub fn prf1(pred: &[bool], truth: &[bool]) -> ClassificationMetrics {
    let mut m = ClassificationMetrics::default();
    for (&p, &t) in pred.iter().zip(truth) {
        match (p, t) {
            (true, true) => m.tp += 1,
            (true, false) => m.fp += 1,
            (false, true) => m.fn_ += 1,
            (false, false) => m.tn += 1,
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { None } else { Some(a as f64 / b as f64) };
    let p = ratio(m.tp, m.tp + m.fp);
    let r = ratio(m.tp, m.tp + m.fn_);
    m.zero_division = p.is_none() || r.is_none();
    m.precision = p.unwrap_or(0.0);
    m.recall = r.unwrap_or(0.0);
    m.f1 = if m.precision + m.recall > 0.0 {
        2.0 * m.precision * m.recall / (m.precision + m.recall)
    } else {
        0.0
    };
    m
}

fn ngrams<'a>(tokens: &[&'a str], n: usize) -> HashMap<Vec<&'a str>, usize> {
    let mut counts = HashMap::new();
    for w in tokens.windows(n) {
        *counts.entry(w.to_vec()).or_insert(0) += 1;
    }
    counts
}

/// Sentence BLEU-4 over whitespace tokens. With `smoothing`, orders 2 to 4
/// add one to both the clipped matches and the candidate n-gram count.
pub fn bleu4_with(candidate: &str, reference: &str, smoothing: bool) -> f64 {
    let c: Vec<&str> = candidate.split_whitespace().collect();
    let r: Vec<&str> = reference.split_whitespace().collect();
    if c.is_empty() || r.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let cn = ngrams(&c, n);
        let rn = ngrams(&r, n);
        let matches: usize = cn.iter().map(|(g, &k)| k.min(*rn.get(g).unwrap_or(&0))).sum();
        let total = c.len().saturating_sub(n - 1);
        let (num, den) = if smoothing && n >= 2 {
            (matches as f64 + 1.0, total as f64 + 1.0)
        } else {
            (matches as f64, total as f64)
        };
        if num == 0.0 || den == 0.0 {
            return 0.0;
        }
        log_sum += (num / den).ln() / 4.0;
    }
    let bp = if c.len() >= r.len() {
        1.0
    } else {
        (1.0 - r.len() as f64 / c.len() as f64).exp()
    };
    (bp * log_sum.exp()).clamp(0.0, 1.0)
}

pub fn bleu4(candidate: &str, reference: &str) -> f64 {
    bleu4_with(candidate, reference, true)
}

pub const ROUGE_BETA: f64 = 1.2;

pub fn lcs_len(a: &[&str], b: &[&str]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS F-measure with recall weighted by `beta`.
pub fn rouge_l(candidate: &str, reference: &str) -> f64 {
    let c: Vec<&str> = candidate.split_whitespace().collect();
    let r: Vec<&str> = reference.split_whitespace().collect();
    if c.is_empty() || r.is_empty() {
        return 0.0;
    }
    let l = lcs_len(&c, &r) as f64;
    if l == 0.0 {
        return 0.0;
    }
    let p = l / c.len() as f64;
    let rec = l / r.len() as f64;
    let b2 = ROUGE_BETA * ROUGE_BETA;
    ((1.0 + b2) * p * rec / (rec + b2 * p)).clamp(0.0, 1.0)
}

/// Constant-velocity forecast from the last observed row, integrated step
/// by step like the synthetic generator.
pub fn dead_reckoning_forecast(last: &[f64; N_VARS], steps: usize, interval_min: f64) -> Result<Vec<[f64; N_VARS]>> {
    let mut out = Vec::with_capacity(steps);
    let mut cur = *last;
    for _ in 0..steps {
        let (lat, lon) = dead_reckon(GeoPoint::new(cur[0], cur[1])?, cur[2], cur[3], interval_min);
        cur = [lat, lon, cur[2], cur[3]];
        out.push(cur);
    }
    Ok(out)
}

/// Position-jump threshold for the shift heuristic, NM.
pub const SHIFT_RESIDUAL_NM: f64 = 0.1;
/// Course change between consecutive steps treated as a heading anomaly, degrees.
pub const HEADING_JUMP_DEG: f64 = 15.0;

/// Rule-based anomaly type from an input window in physical units: an
/// unexplained position jump means a shift, otherwise the larger of the
/// course and speed discontinuities decides.
pub fn classify_anomaly_kind(input: &[[f64; N_VARS]], interval_min: f64) -> AnomalyKind {
    let mut pos_resid: f64 = 0.0;
    let mut cog_jump: f64 = 0.0;
    let mut sog_jump: f64 = 0.0;
    for w in input.windows(2) {
        let (a, b) = (&w[0], &w[1]);
        if let (Ok(pa), Ok(pb)) = (GeoPoint::new(a[0], a[1]), GeoPoint::new(b[0], b[1])) {
            let (lat, lon) = dead_reckon(pa, b[2], b[3], interval_min);
            if let Ok(p) = GeoPoint::new(lat, lon) {
                pos_resid = pos_resid.max(haversine_nm(p, pb));
            }
        }
        cog_jump = cog_jump.max(angle_diff_deg(a[3], b[3]).abs());
        let ratio = (b[2].max(0.1) / a[2].max(0.1)).ln().abs();
        sog_jump = sog_jump.max(ratio);
    }
    if pos_resid > SHIFT_RESIDUAL_NM {
        AnomalyKind::Shift
    } else if cog_jump >= HEADING_JUMP_DEG && cog_jump / 90.0 >= sog_jump / 2.0f64.ln() {
        AnomalyKind::Heading
    } else {
        AnomalyKind::Speed
    }
}

/// Index of the input step with the largest discontinuity, each cue scaled
/// by its threshold in [`classify_anomaly_kind`].
pub fn anomaly_onset(input: &[[f64; N_VARS]], interval_min: f64) -> usize {
    let mut best = (0.0, 0usize);
    for (i, w) in input.windows(2).enumerate() {
        let (a, b) = (&w[0], &w[1]);
        let mut score = angle_diff_deg(a[3], b[3]).abs() / HEADING_JUMP_DEG;
        score = score.max((b[2].max(0.1) / a[2].max(0.1)).ln().abs() / 2.0f64.ln());
        if let (Ok(pa), Ok(pb)) = (GeoPoint::new(a[0], a[1]), GeoPoint::new(b[0], b[1])) {
            let (lat, lon) = dead_reckon(pa, b[2], b[3], interval_min);
            if let Ok(p) = GeoPoint::new(lat, lon) {
                score = score.max(haversine_nm(p, pb) / SHIFT_RESIDUAL_NM);
            }
        }
        if score > best.0 {
            best = (score, i + 1);
        }
    }
    best.1
}

/// Model outputs for one sample in physical units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub trajectory: Vec<[f64; N_VARS]>,
    pub anomaly_prob: f64,
    pub cri: f64,
    /// Two decoder prefix rows, kept for generation.
    #[serde(skip)]
    pub context: Vec<f64>,
}

pub fn predict<F: Scalar>(model: &Model<F>, sample: &Sample, stats: &NormalizationStats) -> Result<Prediction> {
    let tape = Tape::no_grad();
    let input = SampleInput {
        input: &sample.input,
        prompt: &sample.prompt,
        lm: None,
    };
    let fwd = crate::model::Fwd::new(&tape, &model.params, &model.config, Mode::eval());
    let out = fwd.forward(&input)?;
    let traj = out.trajectory.value().to_f64_vec();
    let rows: Vec<[f64; N_VARS]> = traj.chunks(N_VARS).map(|c| [c[0], c[1], c[2], c[3]]).collect();
    let context = fwd.lm_context(out.aligned)?.value().to_f64_vec();
    Ok(Prediction {
        trajectory: stats.invert_rows(&rows),
        anomaly_prob: out.anomaly.value().to_f64_vec()[1],
        cri: out.collision.item().as_f64(),
        context,
    })
}

/// Task outputs for the decoder prompt at inference time.
pub fn inferred_outputs(sample: &Sample, pred: &Prediction, stats: &NormalizationStats, interval_min: f64) -> TaskOutputs {
    let input = stats.invert_rows(&sample.input);
    let anomalous = pred.anomaly_prob >= 0.5;
    TaskOutputs {
        current: *input.last().expect("non-empty input"),
        predicted: *pred.trajectory.last().expect("non-empty forecast"),
        anomaly_prob: pred.anomaly_prob,
        anomaly_kind: anomalous.then(|| classify_anomaly_kind(&input, interval_min)),
        cri: pred.cri.clamp(0.0, 1.0),
    }
}

/// Greedy explanation for a sample from model outputs.
pub fn generate_explanation<F: Scalar>(
    model: &Model<F>,
    sample: &Sample,
    pred: &Prediction,
    stats: &NormalizationStats,
    interval_min: f64,
    max_len: usize,
) -> Result<String> {
    let prompt = build_prompt(&inferred_outputs(sample, pred, stats, interval_min));
    let ctx = diffcore::Tensor::from_f64(&[2, model.config.d_model], &pred.context)?;
    Ok(detokenize(&model.generate_from_context(&ctx, &prompt, max_len)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    /// Samples used for generated-text metrics; generation is the slow part.
    pub text_samples: usize,
    pub max_explanation_len: usize,
    pub interval_min: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            text_samples: 16,
            max_explanation_len: 400,
            interval_min: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    pub trajectory: TrajectoryMetrics,
    pub baseline: TrajectoryMetrics,
    pub anomaly: ClassificationMetrics,
    pub cri_mae: f64,
    /// Teacher-forced per-token cross-entropy of the reference explanations.
    pub explanation_ce: f64,
    pub text: TextMetrics,
    /// Conventions behind the text metrics.
    pub notes: Vec<String>,
}

fn trajectory_metrics(preds: &[Vec<[f64; N_VARS]>], truths: &[Vec<[f64; N_VARS]>]) -> Result<TrajectoryMetrics> {
    let mut m = TrajectoryMetrics::default();
    let n = preds.len().max(1) as f64;
    for (p, t) in preds.iter().zip(truths) {
        let pp: Vec<(f64, f64)> = p.iter().map(|r| (r[0], r[1])).collect();
        let tt: Vec<(f64, f64)> = t.iter().map(|r| (r[0], r[1])).collect();
        let (ade, fde) = ade_fde(&pp, &tt)?;
        let pf: Vec<f64> = p.iter().flatten().copied().collect();
        let tf: Vec<f64> = t.iter().flatten().copied().collect();
        let (mse, mae) = mse_mae(&pf, &tf)?;
        m.ade += ade / n;
        m.fde += fde / n;
        m.mse += mse / n;
        m.mae += mae / n;
    }
    Ok(m)
}

pub fn evaluate<F: Scalar>(
    model: &Model<F>,
    samples: &[Sample],
    stats: &NormalizationStats,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::EmptyInput { skipped: 0 });
    }
    let preds: Vec<Prediction> = samples
        .par_iter()
        .map(|s| predict(model, s, stats))
        .collect::<Result<_>>()?;
    let truths: Vec<Vec<[f64; N_VARS]>> = samples.iter().map(|s| stats.invert_rows(&s.target)).collect();
    let pred_tracks: Vec<Vec<[f64; N_VARS]>> = preds.iter().map(|p| p.trajectory.clone()).collect();
    let trajectory = trajectory_metrics(&pred_tracks, &truths)?;
    let baseline_tracks: Vec<Vec<[f64; N_VARS]>> = samples
        .iter()
        .map(|s| {
            let last = stats.invert(s.input.last().expect("non-empty input"));
            dead_reckoning_forecast(&last, s.target.len(), opts.interval_min)
        })
        .collect::<Result<_>>()?;
    let baseline = trajectory_metrics(&baseline_tracks, &truths)?;

    let flagged: Vec<bool> = preds.iter().map(|p| p.anomaly_prob >= 0.5).collect();
    let truth: Vec<bool> = samples.iter().map(|s| s.label == 1).collect();
    let anomaly = prf1(&flagged, &truth);
    let cri_mae = preds.iter().zip(samples).map(|(p, s)| (p.cri - s.cri).abs()).sum::<f64>() / samples.len() as f64;

    let ce: Vec<f64> = samples
        .par_iter()
        .map(|s| sample_eval(model, s, true).map(|p| p.expl))
        .collect::<Result<_>>()?;
    let explanation_ce = ce.iter().sum::<f64>() / ce.len() as f64;

    let k = opts.text_samples.min(samples.len());
    let texts: Vec<(f64, f64)> = (0..k)
        .into_par_iter()
        .map(|i| {
            let text = generate_explanation(model, &samples[i], &preds[i], stats, opts.interval_min, opts.max_explanation_len)?;
            Ok((bleu4(&text, &samples[i].explanation), rouge_l(&text, &samples[i].explanation)))
        })
        .collect::<Result<_>>()?;
    let kd = k.max(1) as f64;
    let text = TextMetrics {
        bleu4: texts.iter().map(|t| t.0).sum::<f64>() / kd,
        rouge_l: texts.iter().map(|t| t.1).sum::<f64>() / kd,
        bertscore: "n/a".into(),
        samples: k,
    };
    Ok(EvalReport {
        samples: samples.len(),
        trajectory,
        baseline,
        anomaly,
        cri_mae,
        explanation_ce,
        text,
        notes: vec![
            "bleu4: whitespace tokens, add-one smoothing for n >= 2".into(),
            format!("rouge_l: LCS F-measure, beta = {ROUGE_BETA}"),
            "bertscore: not computed".into(),
        ],
    })
}
