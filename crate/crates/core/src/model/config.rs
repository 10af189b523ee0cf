use serde::{Deserialize, Serialize};

use super::{Init, VOCAB};
use crate::ais::N_VARS;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fusion {
    /// Attention over the concatenated scale features.
    Attention,
    Concat,
    Add,
}

/// Architectural variants used for the ablation table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoMultiscale,
    ShortScales,
    LongScales,
    NoAlignment,
    ConcatFusion,
    AddFusion,
}

impl Variant {
    pub const ABLATIONS: [Variant; 6] = [
        Variant::NoMultiscale,
        Variant::ShortScales,
        Variant::LongScales,
        Variant::NoAlignment,
        Variant::ConcatFusion,
        Variant::AddFusion,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoMultiscale => "no_multiscale",
            Variant::ShortScales => "short_scales",
            Variant::LongScales => "long_scales",
            Variant::NoAlignment => "no_alignment",
            Variant::ConcatFusion => "concat_fusion",
            Variant::AddFusion => "add_fusion",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        std::iter::once(Variant::Full)
            .chain(Self::ABLATIONS)
            .find(|v| v.name() == name)
    }

    /// Row label in the ablation report.
    pub fn label(self) -> &'static str {
        match self {
            Variant::Full => "AIS-LLM (Full)",
            Variant::NoMultiscale => "w/o Multi-scale (Single)",
            Variant::ShortScales => "Short scales only",
            Variant::LongScales => "Long scales only",
            Variant::NoAlignment => "w/o Cross-modal Alignment",
            Variant::ConcatFusion => "Concatenation fusion",
            Variant::AddFusion => "Addition fusion",
        }
    }

    pub fn apply(self, cfg: &mut ModelConfig) {
        match self {
            Variant::Full => {}
            Variant::NoMultiscale => cfg.scales = vec![1],
            Variant::ShortScales => cfg.scales = vec![1, 4],
            Variant::LongScales => cfg.scales = vec![16, 32],
            Variant::NoAlignment => cfg.alignment = false,
            Variant::ConcatFusion => cfg.fusion = Fusion::Concat,
            Variant::AddFusion => cfg.fusion = Fusion::Add,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_vars: usize,
    pub seq_in: usize,
    pub pred_len: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub scales: Vec<usize>,
    pub d_prompt: usize,
    pub prompt_layers: usize,
    pub lm_layers: usize,
    pub dropout: f64,
    pub label_smoothing: f64,
    pub fusion: Fusion,
    pub alignment: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_vars: N_VARS,
            seq_in: 18,
            pred_len: 24,
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            scales: vec![1, 4, 16, 32],
            d_prompt: 64,
            prompt_layers: 2,
            lm_layers: 2,
            dropout: 0.1,
            label_smoothing: 0.1,
            fusion: Fusion::Attention,
            alignment: true,
        }
    }
}

fn glorot(fan_in: usize, fan_out: usize) -> Init {
    Init::Uniform((6.0 / (fan_in + fan_out) as f64).sqrt())
}

impl ModelConfig {
    pub fn with_variant(mut self, v: Variant) -> Self {
        v.apply(&mut self);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_vars != N_VARS {
            return bad(format!("n_vars must be {N_VARS}"));
        }
        if self.seq_in == 0 || self.pred_len == 0 || self.n_layers == 0 || self.lm_layers == 0 {
            return bad("seq_in, pred_len and layer counts must be positive".into());
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 || self.d_prompt % self.n_heads != 0 {
            return bad(format!(
                "d_model {} and d_prompt {} must be divisible by n_heads {}",
                self.d_model, self.d_prompt, self.n_heads
            ));
        }
        if self.scales.is_empty() || self.scales[0] == 0 || self.scales.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("scales {:?} must be positive and strictly increasing", self.scales));
        }
        if !(0.0..1.0).contains(&self.dropout) || !(0.0..1.0).contains(&self.label_smoothing) {
            return bad("dropout and label_smoothing must lie in [0, 1)".into());
        }
        Ok(())
    }

    fn block_specs(out: &mut Vec<(String, Vec<usize>, Init)>, name: &str, d: usize) {
        let lin = |out: &mut Vec<(String, Vec<usize>, Init)>, n: String, i: usize, o: usize| {
            out.push((format!("{n}.w"), vec![i, o], glorot(i, o)));
            out.push((format!("{n}.b"), vec![o], Init::Zeros));
        };
        for ln in ["ln1", "ln2"] {
            out.push((format!("{name}.{ln}.g"), vec![d], Init::Ones));
            out.push((format!("{name}.{ln}.b"), vec![d], Init::Zeros));
        }
        for p in ["q", "k", "v", "o"] {
            lin(out, format!("{name}.attn.{p}"), d, d);
        }
        lin(out, format!("{name}.ff1"), d, 4 * d);
        lin(out, format!("{name}.ff2"), 4 * d, d);
    }

    /// Every parameter with its shape and initialiser, in a fixed order.
    pub(crate) fn param_specs(&self) -> Vec<(String, Vec<usize>, Init)> {
        let (d, dp, v) = (self.d_model, self.d_prompt, self.n_vars);
        let mut s: Vec<(String, Vec<usize>, Init)> = Vec::new();
        let lin = |s: &mut Vec<(String, Vec<usize>, Init)>, n: &str, i: usize, o: usize, bias: bool| {
            s.push((format!("{n}.w"), vec![i, o], glorot(i, o)));
            if bias {
                s.push((format!("{n}.b"), vec![o], Init::Zeros));
            }
        };
        let ln = |s: &mut Vec<(String, Vec<usize>, Init)>, n: &str, dim: usize| {
            s.push((format!("{n}.g"), vec![dim], Init::Ones));
            s.push((format!("{n}.b"), vec![dim], Init::Zeros));
        };

        s.push(("revin.gain".into(), vec![v], Init::Ones));
        s.push(("revin.bias".into(), vec![v], Init::Zeros));
        lin(&mut s, "embed", self.seq_in, d, true);

        lin(&mut s, "ms.lift", v, d, true);
        for &sc in &self.scales {
            for p in ["q", "k", "v"] {
                lin(&mut s, &format!("ms.s{sc}.{p}"), d, d, false);
            }
            s.push((format!("ms.s{sc}.alpha"), vec![1], Init::Ones));
        }
        let cat = d * self.scales.len();
        match self.fusion {
            Fusion::Attention => {
                for p in ["q", "k", "v"] {
                    lin(&mut s, &format!("ms.fuse.{p}"), cat, d, false);
                }
                lin(&mut s, "ms.fuse.o", d, d, true);
            }
            Fusion::Concat => lin(&mut s, "ms.fuse.o", cat, d, true),
            Fusion::Add => lin(&mut s, "ms.fuse.o", d, d, true),
        }

        for l in 0..self.n_layers {
            Self::block_specs(&mut s, &format!("enc.{l}"), d);
        }

        s.push(("prompt.tok".into(), vec![VOCAB, dp], Init::Uniform(1.0)));
        for l in 0..self.prompt_layers {
            Self::block_specs(&mut s, &format!("prompt.{l}"), dp);
        }
        ln(&mut s, "prompt.ln", dp);
        Self::block_specs(&mut s, "prompt.refine", dp);

        if self.alignment {
            lin(&mut s, "align.proj", dp, d, false);
            for p in ["q", "k", "v", "o"] {
                lin(&mut s, &format!("align.{p}"), d, d, false);
            }
            lin(&mut s, "align.chan", dp, v, false);
        }

        ln(&mut s, "head.ln", d);
        lin(&mut s, "head.traj", d, self.pred_len * v, true);
        lin(&mut s, "head.anom", d, 2, true);
        lin(&mut s, "head.coll", d, 1, true);

        lin(&mut s, "lm.ctx0", d, d, true);
        lin(&mut s, "lm.ctx1", d, d, true);
        s.push(("lm.tok".into(), vec![VOCAB, d], Init::Uniform(1.0)));
        for l in 0..self.lm_layers {
            Self::block_specs(&mut s, &format!("lm.{l}"), d);
        }
        ln(&mut s, "lm.ln", d);
        lin(&mut s, "lm.out", d, VOCAB, true);
        s
    }
}
