use diffcore::{ParamStore, Scalar, Tape, Tensor, Var};

use super::{tokenize, Fusion, Mode, ModelConfig, Outputs, SampleInput, MAX_SEQ};
use crate::ais::N_VARS;
use crate::error::{Error, Result};

/// Floor on the per-variable standard deviation.
pub const REVIN_EPS: f64 = 1e-5;

/// Per-variable statistics of one input window.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RevinState {
    pub mean: [f64; N_VARS],
    pub std: [f64; N_VARS],
}

pub fn revin_normalize(x: &[[f64; N_VARS]]) -> (Vec<[f64; N_VARS]>, RevinState) {
    let n = x.len().max(1) as f64;
    let mut mean = [0.0; N_VARS];
    let mut std = [0.0; N_VARS];
    for v in 0..N_VARS {
        mean[v] = x.iter().map(|r| r[v]).sum::<f64>() / n;
        let var = x.iter().map(|r| (r[v] - mean[v]).powi(2)).sum::<f64>() / n;
        std[v] = var.sqrt().max(REVIN_EPS);
    }
    let out = x
        .iter()
        .map(|r| std::array::from_fn(|v| (r[v] - mean[v]) / std[v]))
        .collect();
    (out, RevinState { mean, std })
}

pub fn revin_denormalize(y: &[[f64; N_VARS]], state: &RevinState) -> Vec<[f64; N_VARS]> {
    y.iter()
        .map(|r| std::array::from_fn(|v| r[v] * state.std[v] + state.mean[v]))
        .collect()
}

/// `PE_s(pos, 2i) = sin(pos * s / 10000^(2i/d))`, cosine on odd columns.
pub fn scale_positional_encoding(len: usize, d: usize, scale: usize) -> Vec<f64> {
    let mut pe = vec![0.0; len * d];
    for pos in 0..len {
        for j in 0..d {
            let i2 = (j - j % 2) as f64;
            let arg = pos as f64 * scale as f64 / 10000f64.powf(i2 / d as f64);
            pe[pos * d + j] = if j % 2 == 0 { arg.sin() } else { arg.cos() };
        }
    }
    pe
}

pub fn sinusoidal_encoding(len: usize, d: usize) -> Vec<f64> {
    scale_positional_encoding(len, d, 1)
}

thread_local! {
    static PE_CACHE: std::cell::RefCell<std::collections::HashMap<(usize, usize, usize), std::rc::Rc<Vec<f64>>>> =
        Default::default();
}

/// Memoised [`scale_positional_encoding`]; tables are reused across forwards.
fn cached_encoding(len: usize, d: usize, scale: usize) -> std::rc::Rc<Vec<f64>> {
    PE_CACHE.with(|c| {
        c.borrow_mut()
            .entry((len, d, scale))
            .or_insert_with(|| std::rc::Rc::new(scale_positional_encoding(len, d, scale)))
            .clone()
    })
}

/// Additive mask: 0 on and below the diagonal, a large negative number above.
/// Equivalent to [`Var::causal_softmax`] when added before a row softmax.
pub fn causal_mask(len: usize) -> Vec<f64> {
    let mut m = vec![0.0; len * len];
    for r in 0..len {
        for c in r + 1..len {
            m[r * len + c] = -1e9;
        }
    }
    m
}

/// One forward pass context: tape, weights, config and dropout mode.
pub struct Fwd<'a, 't, F: Scalar> {
    pub tape: &'t Tape<F>,
    pub params: &'a ParamStore<F>,
    pub cfg: &'a ModelConfig,
    pub mode: Mode,
}

impl<'a, 't, F: Scalar> Fwd<'a, 't, F> {
    pub fn new(tape: &'t Tape<F>, params: &'a ParamStore<F>, cfg: &'a ModelConfig, mode: Mode) -> Self {
        Self { tape, params, cfg, mode }
    }

    fn p(&self, name: &str) -> Result<Var<'t, F>> {
        Ok(self.tape.param_named(self.params, name)?)
    }

    fn constant(&self, shape: &[usize], data: &[f64]) -> Result<Var<'t, F>> {
        Ok(self.tape.constant(Tensor::from_f64(shape, data)?))
    }

    pub fn linear(&self, x: Var<'t, F>, name: &str) -> Result<Var<'t, F>> {
        let y = x.matmul(self.p(&format!("{name}.w"))?)?;
        let bias = format!("{name}.b");
        if self.params.id(&bias).is_ok() {
            Ok(y.add(self.p(&bias)?)?)
        } else {
            Ok(y)
        }
    }

    pub fn layer_norm(&self, x: Var<'t, F>, name: &str) -> Result<Var<'t, F>> {
        Ok(x.layer_norm(self.p(&format!("{name}.g"))?, self.p(&format!("{name}.b"))?, 1e-5)?)
    }

    fn dropout(&self, x: Var<'t, F>, site: &str) -> Result<Var<'t, F>> {
        Ok(x.dropout(self.mode.dropout, self.mode.key(site))?)
    }

    /// Multi-head scaled dot-product attention, optionally causal.
    pub fn mha(&self, xq: Var<'t, F>, xkv: Var<'t, F>, name: &str, causal: bool) -> Result<Var<'t, F>> {
        let q = self.linear(xq, &format!("{name}.q"))?;
        let k = self.linear(xkv, &format!("{name}.k"))?;
        let v = self.linear(xkv, &format!("{name}.v"))?;
        let heads = self.cfg.n_heads;
        let scale = F::from_f64(1.0 / ((q.shape()[1] / heads) as f64).sqrt());
        let o = q.attention(k, v, heads, scale, causal)?;
        self.linear(o, &format!("{name}.o"))
    }

    /// Pre-LN transformer layer.
    pub fn block(&self, x: Var<'t, F>, name: &str, causal: bool) -> Result<Var<'t, F>> {
        let a = self.layer_norm(x, &format!("{name}.ln1"))?;
        let a = self.mha(a, a, &format!("{name}.attn"), causal)?;
        let x = x.add(self.dropout(a, &format!("{name}.attn"))?)?;
        let f = self.layer_norm(x, &format!("{name}.ln2"))?;
        let f = self.linear(f, &format!("{name}.ff1"))?.gelu();
        let f = self.linear(f, &format!("{name}.ff2"))?;
        Ok(x.add(self.dropout(f, &format!("{name}.ff"))?)?)
    }

    /// Multi-scale temporal attention over the lifted `[seq_in, d]` sequence.
    pub fn multiscale(&self, x: Var<'t, F>) -> Result<Var<'t, F>> {
        let t = self.cfg.seq_in;
        let d = self.cfg.d_model;
        let xt = self.linear(x, "ms.lift")?;
        let inv = F::from_f64(1.0 / (d as f64).sqrt());
        let mut feats = Vec::with_capacity(self.cfg.scales.len());
        for &s in &self.cfg.scales {
            let pooled = if s == 1 { xt } else { xt.avg_pool1d(s)? };
            let len = pooled.shape()[0];
            let pooled = pooled.add(self.constant(&[len, d], &cached_encoding(len, d, s))?)?;
            let name = format!("ms.s{s}");
            let q = self.linear(pooled, &format!("{name}.q"))?;
            let k = self.linear(pooled, &format!("{name}.k"))?;
            let v = self.linear(pooled, &format!("{name}.v"))?;
            let logits = q
                .matmul(k.transpose()?)?
                .scale(inv)
                .mul(self.p(&format!("{name}.alpha"))?)?;
            let f = logits.softmax(1)?.matmul(v)?;
            feats.push(if s == 1 { f } else { f.nearest_upsample1d(s, t)? });
        }
        let fused = match self.cfg.fusion {
            Fusion::Attention => {
                let c = Var::concat(&feats, 1)?;
                let q = self.linear(c, "ms.fuse.q")?;
                let k = self.linear(c, "ms.fuse.k")?;
                let v = self.linear(c, "ms.fuse.v")?;
                let a = q.matmul(k.transpose()?)?.scale(inv).softmax(1)?;
                self.linear(a.matmul(v)?, "ms.fuse.o")?
            }
            Fusion::Concat => self.linear(Var::concat(&feats, 1)?, "ms.fuse.o")?,
            Fusion::Add => {
                let mut acc = feats[0];
                for f in &feats[1..] {
                    acc = acc.add(*f)?;
                }
                self.linear(acc, "ms.fuse.o")?
            }
        };
        Ok(fused.add(xt)?)
    }

    /// Semantic vector of a prompt, `[1, d_prompt]`.
    pub fn encode_prompt(&self, text: &str) -> Result<Var<'t, F>> {
        if text.len() > MAX_SEQ {
            return Err(Error::PromptTooLong(text.len()));
        }
        let toks = tokenize(text);
        let (n, dp) = (toks.len(), self.cfg.d_prompt);
        let mut h = self
            .p("prompt.tok")?
            .embedding(&toks)?
            .add(self.constant(&[n, dp], &cached_encoding(n, dp, 1))?)?;
        for l in 0..self.cfg.prompt_layers {
            h = self.block(h, &format!("prompt.{l}"), false)?;
        }
        let h = self.layer_norm(h, "prompt.ln")?;
        self.block(h.slice(0, n - 1, 1)?, "prompt.refine", false)
    }

    /// Cross-attention from variable tokens to the projected prompt vector,
    /// plus a per-variable bias channel.
    pub fn align(&self, h: Var<'t, F>, hp: Var<'t, F>) -> Result<Var<'t, F>> {
        let d = self.cfg.d_model;
        let kv = self.linear(hp, "align.proj")?;
        let q = self.linear(h, "align.q")?;
        let k = self.linear(kv, "align.k")?;
        let v = self.linear(kv, "align.v")?;
        let a = q
            .matmul(k.transpose()?)?
            .scale(F::from_f64(1.0 / (d as f64).sqrt()))
            .softmax(1)?;
        let o = self.linear(a.matmul(v)?, "align.o")?;
        let chan = self.linear(hp, "align.chan")?.transpose()?;
        Ok(h.add(o)?.add(chan)?)
    }

    /// Two prefix rows for the decoder from the pooled aligned tokens.
    pub fn lm_context(&self, aligned: Var<'t, F>) -> Result<Var<'t, F>> {
        let d = self.cfg.d_model;
        let z = aligned.mean(0)?.reshape(&[1, d])?;
        Ok(Var::concat(&[self.linear(z, "lm.ctx0")?, self.linear(z, "lm.ctx1")?], 0)?)
    }

    fn lm_hidden(&self, ctx: Var<'t, F>, tokens: &[usize]) -> Result<Var<'t, F>> {
        let (n, d) = (tokens.len(), self.cfg.d_model);
        if n > MAX_SEQ {
            return Err(Error::SequenceTooLong(n, MAX_SEQ));
        }
        let e = self
            .p("lm.tok")?
            .embedding(tokens)?
            .add(self.constant(&[n, d], &cached_encoding(n, d, 1))?)?;
        let e = self.dropout(e, "lm.embed")?;
        let mut x = Var::concat(&[ctx, e], 0)?;
        for l in 0..self.cfg.lm_layers {
            x = self.block(x, &format!("lm.{l}"), true)?;
        }
        let x = self.layer_norm(x, "lm.ln")?;
        Ok(x.slice(0, 2, n)?)
    }

    /// Next-token logits for every position of `tokens`, `[n, VOCAB]`.
    pub fn lm_logits(&self, ctx: Var<'t, F>, tokens: &[usize]) -> Result<Var<'t, F>> {
        let h = self.lm_hidden(ctx, tokens)?;
        self.linear(h, "lm.out")
    }

    /// Teacher-forced logits restricted to the rows that predict the target
    /// bytes and the closing EOS, with those tokens.
    pub fn lm_teacher(&self, ctx: Var<'t, F>, prompt: &str, target: &str) -> Result<(Var<'t, F>, Vec<usize>)> {
        let mut seq = tokenize(prompt);
        seq.pop();
        let lp = seq.len();
        seq.extend(target.bytes().map(usize::from));
        seq.push(super::EOS);
        if seq.len() > MAX_SEQ {
            return Err(Error::SequenceTooLong(seq.len(), MAX_SEQ));
        }
        let inputs = &seq[..seq.len() - 1];
        let h = self.lm_hidden(ctx, inputs)?;
        let rows = seq.len() - lp;
        let logits = self.linear(h.slice(0, lp - 1, rows)?, "lm.out")?;
        Ok((logits, seq[lp..].to_vec()))
    }

    pub fn forward(&self, sample: &SampleInput<'_>) -> Result<Outputs<'t, F>> {
        let cfg = self.cfg;
        let (t, v, d) = (cfg.seq_in, cfg.n_vars, cfg.d_model);
        if sample.input.len() != t {
            return Err(Error::ShapeMismatch(vec![t, v], vec![sample.input.len(), v]));
        }
        let (xn, revin) = revin_normalize(sample.input);
        let flat: Vec<f64> = xn.iter().flatten().copied().collect();
        let gain = self.p("revin.gain")?;
        let bias = self.p("revin.bias")?;
        let x = self.constant(&[t, v], &flat)?.mul(gain)?.add(bias)?;

        let mut h = self.linear(x.transpose()?, "embed")?;
        let summary = self.multiscale(x)?.mean(0)?;
        h = self.dropout(h.add(summary)?, "embed")?;
        for l in 0..cfg.n_layers {
            h = self.block(h, &format!("enc.{l}"), false)?;
        }

        let aligned = if cfg.alignment {
            let hp = self.encode_prompt(sample.prompt)?;
            self.align(h, hp)?
        } else {
            h
        };

        let z = self.layer_norm(aligned.mean(0)?.reshape(&[1, d])?, "head.ln")?;
        let eps2 = self.constant(&[1], &[REVIN_EPS * REVIN_EPS])?;
        let trajectory = self
            .linear(z, "head.traj")?
            .reshape(&[cfg.pred_len, v])?
            .sub(bias)?
            .div(gain.add(eps2)?)?
            .mul(self.constant(&[v], &revin.std)?)?
            .add(self.constant(&[v], &revin.mean)?)?;
        let anomaly_logits = self.linear(z, "head.anom")?;
        let anomaly = anomaly_logits.softmax(1)?;
        let collision = self.linear(z, "head.coll")?.sigmoid();

        let lm = match sample.lm {
            Some((p, tgt)) => Some(self.lm_teacher(self.lm_context(aligned)?, p, tgt)?),
            None => None,
        };
        Ok(Outputs {
            trajectory,
            anomaly,
            anomaly_logits,
            collision,
            aligned,
            lm,
            revin,
        })
    }
}
