//! Multi-task losses, AdamW, the learning-rate schedule and the fit loop.

use std::io::Write;
use std::time::Instant;

use diffcore::{ParamStore, Scalar, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ais::{NormalizationStats, N_VARS};
use crate::briefing::{build_prompt, encoder_prompt, TaskOutputs};
use crate::error::{Error, Result};
use crate::model::{Mode, Model, Outputs, SampleInput};
use crate::synth::LabeledWindow;

/// Class weights for (normal, anomalous).
pub const CLASS_WEIGHTS: [f64; 2] = [0.3, 0.7];
pub const HUBER_DELTA: f64 = 0.1;
/// Probabilities are clamped here before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub traj: f64,
    pub anom: f64,
    pub coll: f64,
    pub expl: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            traj: 2.0,
            anom: 1.5,
            coll: 1.5,
            expl: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.traj, self.anom, self.coll, self.expl].iter().all(|w| w.is_finite() && *w >= 0.0) {
            Ok(())
        } else {
            Err(Error::Config(format!("loss weights must be non-negative: {self:?}")))
        }
    }
}

/// The four task losses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub traj: f64,
    pub anom: f64,
    pub coll: f64,
    pub expl: f64,
}

impl LossParts {
    pub fn total(&self, w: &LossWeights) -> f64 {
        total_loss(self, w)
    }

    fn add_scaled(&mut self, o: &LossParts, s: f64) {
        self.traj += o.traj * s;
        self.anom += o.anom * s;
        self.coll += o.coll * s;
        self.expl += o.expl * s;
    }
}

pub fn total_loss(p: &LossParts, w: &LossWeights) -> f64 {
    w.traj * p.traj + w.anom * p.anom + w.coll * p.coll + w.expl * p.expl
}

/// Mean absolute error over every element.
pub fn loss_trajectory(pred: &[[f64; N_VARS]], target: &[[f64; N_VARS]]) -> Result<f64> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::ShapeMismatch(vec![pred.len(), N_VARS], vec![target.len(), N_VARS]));
    }
    let s: f64 = pred
        .iter()
        .zip(target)
        .flat_map(|(p, t)| p.iter().zip(t).map(|(a, b)| (a - b).abs()))
        .sum();
    Ok(s / (pred.len() * N_VARS) as f64)
}

/// Class-weighted cross-entropy against label-smoothed targets.
pub fn loss_anomaly(probs: [f64; 2], label: u8, smoothing: f64) -> f64 {
    let y = label.min(1) as usize;
    let q = [0usize, 1].map(|k| if k == y { 1.0 - smoothing + smoothing / 2.0 } else { smoothing / 2.0 });
    -CLASS_WEIGHTS[y] * (0..2).map(|k| q[k] * probs[k].max(PROB_FLOOR).ln()).sum::<f64>()
}

pub fn huber(x: f64, delta: f64) -> f64 {
    if x.abs() <= delta {
        0.5 * x * x
    } else {
        delta * (x.abs() - 0.5 * delta)
    }
}

/// Mean over the batch of `(1 + 2 r) * Huber(pred - r)`.
pub fn loss_collision(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::ShapeMismatch(vec![pred.len()], vec![target.len()]));
    }
    let s: f64 = pred
        .iter()
        .zip(target)
        .map(|(p, r)| (1.0 + 2.0 * r) * huber(p - r, HUBER_DELTA))
        .sum();
    Ok(s / pred.len() as f64)
}

/// Mean next-token cross-entropy over rows where `mask` is set.
pub fn loss_explanation(logits: &[Vec<f64>], targets: &[usize], mask: &[bool]) -> Result<f64> {
    if logits.len() != targets.len() || mask.len() != targets.len() {
        return Err(Error::ShapeMismatch(vec![logits.len()], vec![targets.len(), mask.len()]));
    }
    let mut total = 0.0;
    let mut n = 0usize;
    for ((row, &t), &m) in logits.iter().zip(targets).zip(mask) {
        if !m {
            continue;
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
        total += lse - row[t];
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(total / n as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub lr_max: f64,
    pub lr_min: f64,
    pub t0: usize,
    pub clip_norm: f64,
    pub accum_steps: usize,
    pub batch_train: usize,
    pub batch_eval: usize,
    pub patience: usize,
    pub max_epochs: usize,
    /// Stop once the validation anomaly accuracy reaches this value.
    pub stop_accuracy: Option<f64>,
    /// Stop once the learning rate sits at its floor.
    pub stop_at_lr_floor: bool,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            lr_max: 1e-4,
            lr_min: 1e-6,
            t0: 10,
            clip_norm: 1.0,
            accum_steps: 4,
            batch_train: 8,
            batch_eval: 16,
            patience: 30,
            max_epochs: 100,
            stop_accuracy: None,
            stop_at_lr_floor: false,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_min < self.lr_max) || self.lr_min < 0.0 {
            return Err(Error::Config(format!("need 0 <= lr_min < lr_max, got {} / {}", self.lr_min, self.lr_max)));
        }
        if self.accum_steps == 0 || self.batch_train == 0 || self.batch_eval == 0 || self.t0 == 0 {
            return Err(Error::Config("batch sizes, accum_steps and t0 must be positive".into()));
        }
        if !(self.clip_norm > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::Config("clip_norm must be positive and weight_decay non-negative".into()));
        }
        Ok(())
    }
}

/// Cosine annealing with fixed-length warm restarts.
pub fn lr_at(epoch: usize, cfg: &OptimizerConfig) -> f64 {
    let t = (epoch % cfg.t0) as f64;
    cfg.lr_min + (cfg.lr_max - cfg.lr_min) / 2.0 * (1.0 + (std::f64::consts::PI * t / cfg.t0 as f64).cos())
}

/// AdamW with decoupled weight decay and bias correction.
#[derive(Clone, Debug)]
pub struct AdamW<F> {
    pub m: Vec<Vec<F>>,
    pub v: Vec<Vec<F>>,
    pub t: u64,
    /// Steps skipped because a gradient was not finite.
    pub skipped: u64,
}

impl<F: Scalar> AdamW<F> {
    pub fn new(params: &ParamStore<F>) -> Self {
        let zeros = || params.ids().map(|id| vec![F::zero(); params.value(id).numel()]).collect();
        Self {
            m: zeros(),
            v: zeros(),
            t: 0,
            skipped: 0,
        }
    }

    /// Applies one update from the gradients held in `params`. Returns
    /// `false`, leaving everything untouched, if a gradient is not finite.
    pub fn step(&mut self, params: &mut ParamStore<F>, lr: f64, cfg: &OptimizerConfig) -> bool {
        let finite = params
            .ids()
            .all(|id| params.grad(id).iter().all(|g| g.is_finite()));
        if !finite {
            self.skipped += 1;
            return false;
        }
        self.t += 1;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let i = id.index();
            let (value, grad) = params.value_and_grad_mut(id);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (k, w) in value.data_mut().iter_mut().enumerate() {
                let g = grad[k].as_f64();
                let mk = b1 * m[k].as_f64() + (1.0 - b1) * g;
                let vk = b2 * v[k].as_f64() + (1.0 - b2) * g * g;
                m[k] = F::from_f64(mk);
                v[k] = F::from_f64(vk);
                let mut x = w.as_f64();
                x -= lr * cfg.weight_decay * x;
                x -= lr * (mk / c1) / ((vk / c2).sqrt() + cfg.eps);
                *w = F::from_f64(x);
            }
        }
        true
    }
}

/// A window prepared for the model: normalised rows, labels and texts.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub input: Vec<[f64; N_VARS]>,
    pub target: Vec<[f64; N_VARS]>,
    pub label: u8,
    pub cri: f64,
    pub prompt: String,
    /// Decoder prompt built from the reference task outputs.
    pub lm_prompt: String,
    pub explanation: String,
}

impl Sample {
    pub fn from_labeled(w: &LabeledWindow, stats: &NormalizationStats, window_in: usize) -> Self {
        let rows = stats.apply_rows(&w.window.rows);
        let reference = TaskOutputs::reference(&w.window, window_in, w.anomaly_kind(), w.cri_target);
        Self {
            input: rows[..window_in].to_vec(),
            target: rows[window_in..].to_vec(),
            label: w.anomaly_label,
            cri: w.cri_target,
            prompt: encoder_prompt(w.window.input(window_in), w.encounter.as_ref()),
            lm_prompt: build_prompt(&reference),
            explanation: w.explanation.clone(),
        }
    }

    pub fn input_ref(&self, with_lm: bool) -> SampleInput<'_> {
        SampleInput {
            input: &self.input,
            prompt: &self.prompt,
            lm: with_lm.then(|| (self.lm_prompt.as_str(), self.explanation.as_str())),
        }
    }
}

pub fn build_samples(windows: &[LabeledWindow], stats: &NormalizationStats, window_in: usize) -> Vec<Sample> {
    windows.par_iter().map(|w| Sample::from_labeled(w, stats, window_in)).collect()
}

/// Differentiable per-sample losses, each a `[1]`-shaped scalar.
pub struct SampleLoss<'t, F: Scalar> {
    pub traj: Var<'t, F>,
    pub anom: Var<'t, F>,
    pub coll: Var<'t, F>,
    pub expl: Option<Var<'t, F>>,
}

impl<'t, F: Scalar> SampleLoss<'t, F> {
    pub fn parts(&self) -> LossParts {
        LossParts {
            traj: self.traj.item().as_f64(),
            anom: self.anom.item().as_f64(),
            coll: self.coll.item().as_f64(),
            expl: self.expl.map_or(0.0, |e| e.item().as_f64()),
        }
    }

    pub fn total(&self, w: &LossWeights) -> Result<Var<'t, F>> {
        let f = F::from_f64;
        let mut t = self
            .traj
            .scale(f(w.traj))
            .add(self.anom.scale(f(w.anom)))?
            .add(self.coll.scale(f(w.coll)))?;
        if let Some(e) = self.expl {
            t = t.add(e.scale(f(w.expl)))?;
        }
        Ok(t)
    }
}

pub fn sample_loss<'t, F: Scalar>(
    tape: &'t Tape<F>,
    out: &Outputs<'t, F>,
    sample: &Sample,
    smoothing: f64,
) -> Result<SampleLoss<'t, F>> {
    let flat: Vec<f64> = sample.target.iter().flatten().copied().collect();
    let target = tape.constant(Tensor::from_f64(&[sample.target.len(), N_VARS], &flat)?);
    let traj = out.trajectory.sub(target)?.abs().mean_all()?;

    let y = sample.label.min(1) as usize;
    let anom = out
        .anomaly_logits
        .cross_entropy_logits(&[y], &[F::from_f64(CLASS_WEIGHTS[y])], smoothing)?;

    let r = tape.constant(Tensor::from_f64(&[1, 1], &[sample.cri])?);
    let coll = out
        .collision
        .sub(r)?
        .huber(HUBER_DELTA)
        .scale(F::from_f64(1.0 + 2.0 * sample.cri))
        .sum_all()?;

    let expl = match &out.lm {
        Some((logits, targets)) => {
            let w = vec![F::from_f64(1.0 / targets.len() as f64); targets.len()];
            Some(logits.cross_entropy_logits(targets, &w, 0.0)?)
        }
        None => None,
    };
    Ok(SampleLoss { traj, anom, coll, expl })
}

/// Forward and backward for one sample, returning its losses and the
/// gradients of the weighted total.
pub fn sample_gradients<F: Scalar>(
    model: &Model<F>,
    sample: &Sample,
    weights: &LossWeights,
    mode: Mode,
) -> Result<(LossParts, diffcore::ParamGrads<F>)> {
    let tape = Tape::new();
    let out = model.forward(&tape, &sample.input_ref(weights.expl > 0.0), mode)?;
    let loss = sample_loss(&tape, &out, sample, model.config.label_smoothing)?;
    let parts = loss.parts();
    let total = loss.total(weights)?;
    if !total.item().is_finite() {
        return Err(Error::NonFinite(format!("training loss {parts:?}")));
    }
    let grads = tape.backward(total)?;
    Ok((parts, grads.into_params()))
}

/// Losses of one sample without recording gradients.
pub fn sample_eval<F: Scalar>(model: &Model<F>, sample: &Sample, with_lm: bool) -> Result<LossParts> {
    let tape = Tape::no_grad();
    let out = model.forward(&tape, &sample.input_ref(with_lm), Mode::eval())?;
    Ok(sample_loss(&tape, &out, sample, model.config.label_smoothing)?.parts())
}

fn sample_mode(dropout: f64, seed: u64, step: u64, index: usize) -> Mode {
    Mode {
        dropout,
        seed,
        step: step.wrapping_mul(1_000_003).wrapping_add(index as u64),
    }
}

/// Zeroes the gradients in `model.params` and accumulates the gradient of
/// the mean micro-batch loss. Each micro-batch contributes its own mean,
/// scaled by `1 / micro_batches.len()`. Returns the mean loss parts.
pub fn accumulate_step<F: Scalar>(
    model: &mut Model<F>,
    micro_batches: &[Vec<(usize, &Sample)>],
    weights: &LossWeights,
    dropout: f64,
    seed: u64,
    step: u64,
) -> Result<LossParts> {
    model.params.zero_grads();
    let mut parts = LossParts::default();
    let n_micro = micro_batches.len() as f64;
    for mb in micro_batches {
        let m: &Model<F> = model;
        let results: Vec<Result<(LossParts, diffcore::ParamGrads<F>)>> = mb
            .par_iter()
            .map(|(i, s)| sample_gradients(m, s, weights, sample_mode(dropout, seed, step, *i)))
            .collect();
        let scale = 1.0 / (mb.len() as f64 * n_micro);
        for r in results {
            let (p, g) = r?;
            parts.add_scaled(&p, scale);
            model.params.accumulate(&g, F::from_f64(scale));
        }
    }
    Ok(parts)
}

/// Mean validation losses over `samples`.
pub fn evaluate_losses<F: Scalar>(model: &Model<F>, samples: &[Sample], with_lm: bool) -> Result<LossParts> {
    let per: Vec<LossParts> = samples
        .par_iter()
        .map(|s| sample_eval(model, s, with_lm))
        .collect::<Result<_>>()?;
    let mut acc = LossParts::default();
    let n = per.len().max(1) as f64;
    for p in &per {
        acc.add_scaled(p, 1.0 / n);
    }
    Ok(acc)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: OptimizerConfig,
    pub weights: LossWeights,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerConfig::default(),
            weights: LossWeights::default(),
            seed: 42,
        }
    }
}

/// One metrics-log line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_total: f64,
    pub val_total: f64,
    pub val_traj: f64,
    pub val_anom: f64,
    pub val_coll: f64,
    pub val_expl: f64,
    pub val_accuracy: f64,
    pub skipped_steps: u64,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub history: Vec<EpochMetrics>,
    pub best_epoch: usize,
    pub best_val: f64,
    pub stopped_early: bool,
    pub seconds: f64,
}

fn val_accuracy<F: Scalar>(model: &Model<F>, samples: &[Sample]) -> Result<f64> {
    let hits: Vec<bool> = samples
        .par_iter()
        .map(|s| {
            let tape = Tape::no_grad();
            let out = model.forward(&tape, &s.input_ref(false), Mode::eval())?;
            let p = out.anomaly.value().to_f64_vec();
            Ok(((p[1] >= 0.5) as u8) == s.label.min(1))
        })
        .collect::<Result<_>>()?;
    Ok(hits.iter().filter(|h| **h).count() as f64 / hits.len().max(1) as f64)
}

/// Trains `model` in place and leaves it holding the best validation weights.
/// Every epoch appends one JSON line to `log` when given.
pub fn fit<F: Scalar>(
    model: &mut Model<F>,
    train: &[Sample],
    val: &[Sample],
    cfg: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<FitReport> {
    let opt = &cfg.optimizer;
    opt.validate()?;
    cfg.weights.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::EmptyInput { skipped: 0 });
    }
    let started = Instant::now();
    let mut adam = AdamW::new(&model.params);
    let mut best = (f64::INFINITY, 0usize, model.params.clone());
    let mut since = 0usize;
    let mut history = Vec::new();
    let mut step = 0u64;
    let mut stopped_early = false;
    let group = opt.batch_train * opt.accum_steps;
    let with_lm = cfg.weights.expl > 0.0;
    for epoch in 0..opt.max_epochs {
        let t0 = Instant::now();
        let lr = lr_at(epoch, opt);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9)));
        let mut train_total = 0.0;
        for chunk in order.chunks(group) {
            let micro: Vec<Vec<(usize, &Sample)>> = chunk
                .chunks(opt.batch_train)
                .map(|c| c.iter().map(|&i| (i, &train[i])).collect())
                .collect();
            let parts = accumulate_step(model, &micro, &cfg.weights, model.config.dropout, cfg.seed, step)?;
            train_total += parts.total(&cfg.weights) * chunk.len() as f64;
            model.params.clip_grad_norm(opt.clip_norm);
            adam.step(&mut model.params, lr, opt);
            step += 1;
        }
        train_total /= train.len() as f64;
        if !train_total.is_finite() || !model.params.all_finite() {
            return Err(Error::NonFinite(format!("epoch {epoch} training loss {train_total}")));
        }

        let v = evaluate_losses(model, val, with_lm)?;
        let val_total = v.total(&cfg.weights);
        if !val_total.is_finite() {
            return Err(Error::NonFinite(format!("epoch {epoch} validation loss {val_total}")));
        }
        let val_accuracy = if opt.stop_accuracy.is_some() { val_accuracy(model, val)? } else { f64::NAN };
        let m = EpochMetrics {
            epoch,
            lr,
            train_total,
            val_total,
            val_traj: v.traj,
            val_anom: v.anom,
            val_coll: v.coll,
            val_expl: v.expl,
            val_accuracy,
            skipped_steps: adam.skipped,
            seconds: t0.elapsed().as_secs_f64(),
        };
        if let Some(w) = log.as_deref_mut() {
            writeln!(w, "{}", serde_json::to_string(&m)?)?;
            w.flush()?;
        }
        history.push(m);
        if val_total < best.0 {
            best = (val_total, epoch, model.params.clone());
            since = 0;
        } else {
            since += 1;
        }
        let hit_accuracy = opt.stop_accuracy.is_some_and(|a| val_accuracy >= a);
        let at_floor = opt.stop_at_lr_floor && lr <= opt.lr_min * (1.0 + 1e-9);
        if since >= opt.patience || hit_accuracy || at_floor {
            stopped_early = true;
            break;
        }
    }
    model.params = best.2;
    Ok(FitReport {
        history,
        best_epoch: best.1,
        best_val: best.0,
        stopped_early,
        seconds: started.elapsed().as_secs_f64(),
    })
}
