//! Run configuration with flat dotted keys.
//!
//! Values come from the defaults, then a TOML file, then `--set key=value`
//! flags. Keys may be written nested (`[model]` tables) or dotted.

use std::collections::BTreeMap;
use std::path::Path;

use aisllm_core::eval::EvalOptions;
use aisllm_core::model::ModelConfig;
use aisllm_core::synth::{DatasetConfig, SynthConfig};
use aisllm_core::training::{LossWeights, OptimizerConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::CliError;

pub const DEFAULT_SEED: u64 = 42;
pub const SEED_ENV: &str = "AISLLM_SEED";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub precision: Precision,
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    pub loss: LossWeights,
    pub data: DatasetConfig,
    pub synth: SynthConfig,
    pub eval: EvalOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: DEFAULT_SEED,
            precision: Precision::F32,
            model: ModelConfig::default(),
            optimizer: OptimizerConfig::default(),
            loss: LossWeights::default(),
            data: DatasetConfig::default(),
            synth: SynthConfig::default(),
            eval: EvalOptions::default(),
        }
    }
}

/// Keys that always follow the run seed.
const SEEDED_KEYS: [&str; 2] = ["data.seed", "synth.seed"];

impl RunConfig {
    /// Copies the run seed into every seeded component.
    pub fn propagate_seed(&mut self) {
        self.data.seed = self.seed;
        self.synth.seed = self.seed;
        self.data.window_in = self.model.seq_in;
        self.data.window_out = self.model.pred_len;
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            optimizer: self.optimizer.clone(),
            weights: self.loss,
            seed: self.seed,
        }
    }

    /// Every settable key with its current value, in sorted order.
    pub fn flat(&self) -> BTreeMap<String, Value> {
        let mut out = BTreeMap::new();
        flatten("", &serde_json::to_value(self).expect("config serialises"), &mut out);
        for k in SEEDED_KEYS {
            out.remove(k);
        }
        out
    }

    pub fn to_toml(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.flat() {
            if !v.is_null() {
                s.push_str(&format!("\"{k}\" = {}\n", toml_literal(&v)));
            }
        }
        s
    }

    /// Builds a configuration from an optional file, `key=value` overrides
    /// and an explicit seed. Without a seed from the flag, file or
    /// overrides, `AISLLM_SEED` is consulted before the default.
    pub fn load(file: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<Self, CliError> {
        let defaults = Self::default();
        let mut flat = defaults.flat();
        flat.insert("seed".into(), Value::Null);
        let set = |key: &str, value: Value, flat: &mut BTreeMap<String, Value>| -> Result<(), CliError> {
            match flat.get_mut(key) {
                Some(slot) => {
                    *slot = value;
                    Ok(())
                }
                None => Err(CliError::usage(format!("unknown config key `{key}`; run --help for the list"))),
            }
        };
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
            let table: toml::Table =
                toml::from_str(&text).map_err(|e| CliError::usage(format!("config {}: {e}", path.display())))?;
            let mut from_file = BTreeMap::new();
            flatten("", &serde_json::to_value(table).map_err(|e| CliError::usage(e.to_string()))?, &mut from_file);
            for (k, v) in from_file {
                set(&k, v, &mut flat)?;
            }
        }
        for o in overrides {
            let (k, raw) = o
                .split_once('=')
                .ok_or_else(|| CliError::usage(format!("override `{o}` is not key=value")))?;
            set(k.trim(), parse_value(raw.trim()), &mut flat)?;
        }
        let seed = match (seed, flat.get("seed").and_then(Value::as_u64)) {
            (Some(s), _) | (None, Some(s)) => s,
            (None, None) => match std::env::var(SEED_ENV) {
                Ok(v) => v
                    .parse()
                    .map_err(|_| CliError::usage(format!("{SEED_ENV}=`{v}` is not an unsigned integer")))?,
                Err(_) => DEFAULT_SEED,
            },
        };
        flat.insert("seed".into(), Value::from(seed));
        for k in SEEDED_KEYS {
            flat.insert(k.into(), Value::from(seed));
        }
        let mut cfg: Self = serde_json::from_value(unflatten(&flat))
            .map_err(|e| CliError::usage(format!("invalid config value: {e}")))?;
        cfg.propagate_seed();
        cfg.model.validate().map_err(CliError::from)?;
        cfg.optimizer.validate().map_err(CliError::from)?;
        cfg.loss.validate().map_err(CliError::from)?;
        Ok(cfg)
    }
}

fn flatten(prefix: &str, v: &Value, out: &mut BTreeMap<String, Value>) {
    match v {
        Value::Object(m) if !m.is_empty() => {
            for (k, x) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, x, out);
            }
        }
        _ => {
            out.insert(prefix.to_string(), v.clone());
        }
    }
}

fn unflatten(flat: &BTreeMap<String, Value>) -> Value {
    let mut root = Map::new();
    for (k, v) in flat {
        let mut node = &mut root;
        let parts: Vec<&str> = k.split('.').collect();
        for p in &parts[..parts.len() - 1] {
            node = node
                .entry(p.to_string())
                .or_insert_with(|| Value::Object(Map::new()))
                .as_object_mut()
                .expect("config keys nest consistently");
        }
        node.insert(parts[parts.len() - 1].to_string(), v.clone());
    }
    Value::Object(root)
}

/// TOML literal if it parses as one, `none` as null, otherwise a bare string.
fn parse_value(raw: &str) -> Value {
    if raw == "none" || raw == "null" {
        return Value::Null;
    }
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => serde_json::to_value(t.remove("v").expect("key v")).unwrap_or(Value::Null),
        Err(_) => Value::String(raw.to_string()),
    }
}

fn toml_literal(v: &Value) -> String {
    match v {
        Value::Null => "none".into(),
        Value::Array(a) => format!("[{}]", a.iter().map(toml_literal).collect::<Vec<_>>().join(", ")),
        Value::Number(n) if n.is_f64() => {
            let x = n.as_f64().expect("f64");
            if x.fract() == 0.0 && x.abs() < 1e15 {
                format!("{x:.1}")
            } else {
                format!("{x}")
            }
        }
        other => other.to_string(),
    }
}

/// The `--help` footer: every key with its default.
pub fn keys_help() -> String {
    let mut s = String::from("Config keys (default), settable in --config files or with --set key=value:\n");
    s.push_str(&format!("  seed = {DEFAULT_SEED}  (fallback: {SEED_ENV})\n"));
    for (k, v) in RunConfig::default().flat() {
        if k != "seed" {
            s.push_str(&format!("  {k} = {}\n", toml_literal(&v)));
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_keys_round_trip() {
        let cfg = RunConfig::default();
        let mut flat = cfg.flat();
        for k in SEEDED_KEYS {
            flat.insert(k.into(), Value::from(DEFAULT_SEED));
        }
        let back: RunConfig = serde_json::from_value(unflatten(&flat)).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn overrides_and_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "\"optimizer.lr_max\" = 0.001\n[model]\nd_model = 32\n").unwrap();
        let cfg = RunConfig::load(
            Some(&path),
            &["model.scales=[1, 8]".into(), "model.fusion=add".into(), "optimizer.stop_accuracy=0.9".into()],
            Some(5),
        )
        .unwrap();
        assert_eq!(cfg.model.d_model, 32);
        assert_eq!(cfg.optimizer.lr_max, 1e-3);
        assert_eq!(cfg.model.scales, vec![1, 8]);
        assert_eq!(cfg.optimizer.stop_accuracy, Some(0.9));
        assert_eq!((cfg.seed, cfg.data.seed, cfg.synth.seed), (5, 5, 5));
        assert!(RunConfig::load(None, &["model.nope=1".into()], None).is_err());
        assert!(RunConfig::load(None, &["model.d_model=abc".into()], None).is_err());
    }

    #[test]
    fn emitted_toml_loads_back() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("echo.toml");
        let mut cfg = RunConfig::default();
        cfg.optimizer.lr_min = 2e-6;
        cfg.seed = 9;
        cfg.propagate_seed();
        std::fs::write(&path, cfg.to_toml()).unwrap();
        assert_eq!(RunConfig::load(Some(&path), &[], None).unwrap(), cfg);
    }

    #[test]
    fn help_lists_every_key() {
        let help = keys_help();
        for k in RunConfig::default().flat().keys() {
            assert!(help.contains(&format!("  {k} = ")), "{k}");
        }
        assert!(help.contains("optimizer.lr_max = 0.0001"));
        assert!(help.contains("loss.traj = 2.0"));
    }
}
