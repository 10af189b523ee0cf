//! The forecasting and explanation model.
//!
//! A forward pass takes one window (already min-max normalised), the encoder
//! prompt and optionally an LM prompt/target pair, and records everything on
//! a [`Tape`]. Batching is done by the caller, one tape per sample.

mod blocks;
mod config;

use std::io::{Read, Write};

use diffcore::{read_archive, write_archive, DropoutKey, ParamStore, Scalar, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::ais::N_VARS;
use crate::error::{Error, Result};

pub use blocks::{
    causal_mask, revin_denormalize, revin_normalize, scale_positional_encoding, sinusoidal_encoding, Fwd,
    RevinState, REVIN_EPS,
};
pub use config::{Fusion, ModelConfig, Variant};

pub const BOS: usize = 256;
pub const EOS: usize = 257;
pub const VOCAB: usize = 258;
/// Longest prompt or prompt+target sequence accepted, in bytes.
pub const MAX_SEQ: usize = 2048;

/// Byte tokens of `text` framed by BOS and EOS.
pub fn tokenize(text: &str) -> Vec<usize> {
    let mut t = Vec::with_capacity(text.len() + 2);
    t.push(BOS);
    t.extend(text.bytes().map(usize::from));
    t.push(EOS);
    t
}

/// Bytes of a token sequence with specials dropped.
pub fn detokenize(tokens: &[usize]) -> String {
    let bytes: Vec<u8> = tokens.iter().filter(|&&t| t < 256).map(|&t| t as u8).collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

/// What a single forward pass needs.
#[derive(Clone, Debug)]
pub struct SampleInput<'a> {
    /// `seq_in` rows, min-max normalised.
    pub input: &'a [[f64; N_VARS]],
    pub prompt: &'a str,
    /// LM prompt and explanation target for teacher forcing.
    pub lm: Option<(&'a str, &'a str)>,
}

/// Dropout settings for one pass; `p = 0` evaluates deterministically.
#[derive(Clone, Copy, Debug)]
pub struct Mode {
    pub dropout: f64,
    pub seed: u64,
    pub step: u64,
}

impl Mode {
    pub fn eval() -> Self {
        Self {
            dropout: 0.0,
            seed: 0,
            step: 0,
        }
    }

    pub fn key(&self, site: &str) -> DropoutKey {
        DropoutKey {
            seed: self.seed,
            site: diffcore::site_id(site),
            step: self.step,
        }
    }
}

pub struct Outputs<'t, F: Scalar> {
    /// Forecast in min-max normalised units, `pred_len x 4`.
    pub trajectory: Var<'t, F>,
    /// `1 x 2` probabilities (normal, anomalous).
    pub anomaly: Var<'t, F>,
    pub anomaly_logits: Var<'t, F>,
    /// `1 x 1` risk in (0, 1).
    pub collision: Var<'t, F>,
    pub aligned: Var<'t, F>,
    /// Logits for the rows that predict target tokens, with those targets.
    pub lm: Option<(Var<'t, F>, Vec<usize>)>,
    pub revin: RevinState,
}

#[derive(Clone, Debug)]
pub struct Model<F: Scalar> {
    pub config: ModelConfig,
    pub params: ParamStore<F>,
}

impl<F: Scalar> Model<F> {
    /// Fresh parameters drawn from a seeded generator.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for (name, shape, init) in config.param_specs() {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = match init {
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::Uniform(a) => (0..n).map(|_| rng.gen_range(-a..=a)).collect(),
            };
            params.insert(name, Tensor::from_f64(&shape, &data)?)?;
        }
        Ok(Self { config, params })
    }

    pub fn forward<'t>(&self, tape: &'t Tape<F>, sample: &SampleInput<'_>, mode: Mode) -> Result<Outputs<'t, F>> {
        Fwd::new(tape, &self.params, &self.config, mode).forward(sample)
    }

    /// Greedy decoding of an explanation for `prompt`, stopping at EOS or
    /// after `max_len` tokens.
    pub fn generate(&self, sample: &SampleInput<'_>, lm_prompt: &str, max_len: usize) -> Result<Vec<usize>> {
        if max_len == 0 {
            return Ok(Vec::new());
        }
        let tape = Tape::no_grad();
        let fwd = Fwd::new(&tape, &self.params, &self.config, Mode::eval());
        let out = fwd.forward(&SampleInput { lm: None, ..sample.clone() })?;
        let ctx = fwd.lm_context(out.aligned)?.value();
        drop(out);
        self.generate_from_context(&ctx, lm_prompt, max_len)
    }

    /// Greedy decoding given the two prefix context rows.
    pub fn generate_from_context(&self, ctx: &Tensor<F>, lm_prompt: &str, max_len: usize) -> Result<Vec<usize>> {
        let mut tokens = tokenize(lm_prompt);
        tokens.pop();
        let start = tokens.len();
        while tokens.len() - start < max_len {
            if tokens.len() + 1 > MAX_SEQ {
                return Err(Error::SequenceTooLong(tokens.len() + 1, MAX_SEQ));
            }
            let tape = Tape::no_grad();
            let fwd = Fwd::new(&tape, &self.params, &self.config, Mode::eval());
            let c = tape.constant(ctx.clone());
            let logits = fwd.lm_logits(c, &tokens)?;
            let next = logits.with_value(|l| {
                let v = l.shape()[1];
                let row = &l.data()[(l.shape()[0] - 1) * v..];
                let mut best = 0;
                for k in 1..v {
                    if row[k] > row[best] {
                        best = k;
                    }
                }
                best
            });
            if next == EOS {
                break;
            }
            tokens.push(next);
        }
        Ok(tokens[start..].to_vec())
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn cast<G: Scalar>(&self) -> Model<G> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    pub fn save<W: Write>(&self, w: W) -> Result<()> {
        let config = serde_json::to_string(&self.config)?;
        write_archive(w, &config, self.params.named_values())?;
        Ok(())
    }

    /// Loads a checkpoint; every tensor of the configured architecture must be present.
    pub fn load<R: Read>(r: R) -> Result<Self> {
        let archive = read_archive(r)?;
        let config: ModelConfig = serde_json::from_str(&archive.config)?;
        config.validate()?;
        let mut params = ParamStore::new();
        let mut by_name: std::collections::HashMap<String, Tensor<f64>> = archive.tensors.into_iter().collect();
        for (name, shape, _) in config.param_specs() {
            let t = by_name
                .remove(&name)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor `{name}`")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch(shape, t.shape().to_vec()));
            }
            params.insert(name, t.cast())?;
        }
        if let Some(extra) = by_name.keys().next() {
            return Err(Error::Format(format!("unexpected tensor `{extra}` in checkpoint")));
        }
        Ok(Self { config, params })
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) enum Init {
    Zeros,
    Ones,
    Uniform(f64),
}
