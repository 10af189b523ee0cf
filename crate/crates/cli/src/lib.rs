//! Workflows behind the `aisllm` command: preprocessing, synthesis,
//! training, evaluation, prediction, briefings and ablations.

pub mod config;

use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use aisllm_core::ais::{
    self, parse_coastline, read_manifest, run_pipeline, sha256_hex, ColumnMap, DatasetManifest, PipelineOptions,
    PipelineProfile, StageCounts,
};
use aisllm_core::briefing::{confidence_from_ade, render_briefing, tracks_geojson, SituationSummary};
use aisllm_core::eval::{
    ade_fde, anomaly_onset, classify_anomaly_kind, evaluate, generate_explanation, predict, EvalReport,
};
use aisllm_core::model::{Model, Variant};
use aisllm_core::synth::{
    build_labeled_dataset, generate_synthetic_traffic, load_dataset, save_dataset, StoredDataset,
};
use aisllm_core::training::{build_samples, fit, EpochMetrics, Sample};
use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use diffcore::Scalar;
use serde::{Deserialize, Serialize};

pub use config::{keys_help, Precision, RunConfig};

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const REPORT_FILE: &str = "report.json";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CONFIG_ECHO_FILE: &str = "config.toml";
pub const ABLATION_FILE: &str = "ablation.tsv";
pub const LABELED_DIR: &str = "labeled";

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<aisllm_core::Error> for CliError {
    fn from(e: aisllm_core::Error) -> Self {
        let code = match e {
            aisllm_core::Error::NonFinite(_) => EXIT_NUMERIC,
            _ => EXIT_USAGE,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::usage(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::usage(e.to_string())
    }
}

type CliResult<T> = Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "aisllm", version, about = "Maritime traffic analysis from AIS trajectories")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct GlobalArgs {
    /// TOML file with config keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one config key, e.g. `--set optimizer.lr_max=1e-3`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub set: Vec<String>,
    /// Run seed; falls back to the config file, then AISLLM_SEED, then 42.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Clean, segment, resample and window a raw AIS CSV.
    Preprocess {
        #[arg(long)]
        input: PathBuf,
        /// piraeus or dma.
        #[arg(long, default_value = "piraeus")]
        profile: String,
        /// Column layout; defaults to the profile's own.
        #[arg(long)]
        columns: Option<String>,
        /// Coastline polylines, one `lat lon` pair per line, blank line between polylines.
        #[arg(long)]
        coastline: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Also write a labelled dataset (injected anomalies, CRI, explanations) under `<out>/labeled`.
        #[arg(long)]
        labeled: bool,
    },
    /// Generate a labelled synthetic traffic dataset.
    Synthesize {
        #[arg(long)]
        out: PathBuf,
        /// Number of segments (same as `--set synth.n_segments=N`).
        #[arg(long)]
        segments: Option<usize>,
    },
    /// Train a model on a labelled dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "full")]
        variant: String,
    },
    /// Evaluate a checkpoint on the test split.
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Write the JSON report here as well as to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Forecast one test window; prints GeoJSON with the numeric outputs.
    Predict {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0)]
        window: usize,
    },
    /// Situation briefing for one test window.
    Brief {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0)]
        window: usize,
    },
    /// Train an architectural variant and append its row to `<out>/ablation.tsv`.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        variant: String,
    },
}

/// Parses `args` (including the program name) and runs the command,
/// writing results to `out`.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> CliResult<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cmd = Cli::command().after_long_help(keys_help()).after_help(keys_help());
    let matches = match cmd.try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                write!(out, "{e}")?;
                return Ok(());
            }
            return Err(CliError::usage(e.render().to_string()));
        }
    };
    let cli = Cli::from_arg_matches(&matches).map_err(|e| CliError::usage(e.to_string()))?;
    if let Some(n) = cli.global.threads {
        // A second call in the same process keeps the first pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    let mut cfg = RunConfig::load(cli.global.config.as_deref(), &cli.global.set, cli.global.seed)?;
    match cli.command {
        Command::Preprocess {
            input,
            profile,
            columns,
            coastline,
            out: dir,
            labeled,
        } => {
            let s = preprocess(&input, &profile, columns.as_deref(), coastline.as_deref(), &dir, labeled, &cfg)?;
            writeln!(out, "{}", serde_json::to_string_pretty(&s)?)?;
        }
        Command::Synthesize { out: dir, segments } => {
            if let Some(n) = segments {
                cfg.synth.n_segments = n;
            }
            let s = synthesize(&dir, &cfg)?;
            writeln!(out, "{}", serde_json::to_string_pretty(&s)?)?;
        }
        Command::Train { data, out: dir, variant } => {
            let variant = parse_variant(&variant)?;
            let t = train(&data, &dir, &cfg, variant)?;
            writeln!(out, "{}", serde_json::to_string_pretty(&t.report.summary())?)?;
        }
        Command::Evaluate { data, checkpoint, out: file } => {
            let r = evaluate_checkpoint(&data, &checkpoint, &cfg)?;
            let text = serde_json::to_string_pretty(&r)?;
            if let Some(f) = file {
                fs::write(f, &text)?;
            }
            writeln!(out, "{text}")?;
        }
        Command::Predict { data, checkpoint, window } => {
            let g = predict_window(&data, &checkpoint, window, &cfg)?;
            writeln!(out, "{}", serde_json::to_string_pretty(&g)?)?;
        }
        Command::Brief { data, checkpoint, window } => {
            let b = brief_window(&data, &checkpoint, window, &cfg)?;
            writeln!(out, "{}", b.render())?;
        }
        Command::Ablate { data, out: dir, variant } => {
            let variant = parse_variant(&variant)?;
            let row = ablate(&data, &dir, &cfg, variant)?;
            writeln!(out, "{}", row.tsv())?;
        }
    }
    Ok(())
}

/// `run` on the process arguments with stdout, returning the exit code.
pub fn main_exit_code() -> i32 {
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    match run(std::env::args_os(), &mut lock) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message.trim_end());
            e.code
        }
    }
}

pub fn parse_variant(name: &str) -> CliResult<Variant> {
    Variant::parse(name).ok_or_else(|| {
        let valid: Vec<&str> = std::iter::once(Variant::Full)
            .chain(Variant::ABLATIONS)
            .map(Variant::name)
            .collect();
        CliError::usage(format!("unknown variant `{name}`; valid variants: {}", valid.join(", ")))
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub dir: PathBuf,
    pub manifest_hash: String,
    pub counts: StageCounts,
    /// Hash of the labelled dataset when one was written.
    pub labeled_hash: Option<String>,
}

pub fn preprocess(
    input: &Path,
    profile: &str,
    columns: Option<&str>,
    coastline: Option<&Path>,
    out: &Path,
    labeled: bool,
    cfg: &RunConfig,
) -> CliResult<DatasetSummary> {
    let prof = PipelineProfile::by_name(profile)
        .ok_or_else(|| CliError::usage(format!("unknown profile `{profile}`; valid profiles: piraeus, dma")))?;
    let col_name = columns.unwrap_or(profile);
    let cols = ColumnMap::by_name(col_name)
        .ok_or_else(|| CliError::usage(format!("unknown column layout `{col_name}`; valid layouts: piraeus, dma")))?;
    let source = fs::read(input).map_err(|e| CliError::usage(format!("cannot read {}: {e}", input.display())))?;
    let coast = match coastline {
        Some(p) => Some(parse_coastline(
            &fs::read_to_string(p).map_err(|e| CliError::usage(format!("cannot read {}: {e}", p.display())))?,
        )?),
        None => None,
    };
    let opts = PipelineOptions {
        profile: prof.clone(),
        columns: cols,
        coastline: coast,
        seed: cfg.seed,
        train_fraction: cfg.data.train_fraction,
    };
    let manifest = run_pipeline(&source, &opts, out)?;
    let labeled_hash = if labeled {
        let result = ais::process(&source, &opts)?;
        let mut data_cfg = cfg.data.clone();
        data_cfg.window_in = prof.window_in;
        data_cfg.window_out = prof.window_out;
        let data = build_labeled_dataset(&result.segments, &data_cfg)?;
        let dir = out.join(LABELED_DIR);
        let mut m = save_dataset(&dir, &data, &data_cfg, None)?;
        m.profile = prof.clone();
        m.counts = StageCounts {
            train_windows: m.counts.train_windows,
            test_windows: m.counts.test_windows,
            ..result.counts
        };
        m.source_sha256 = manifest.source_sha256.clone();
        m.coastline_applied = manifest.coastline_applied;
        ais::write_manifest(&dir, &m)?;
        Some(m.content_hash())
    } else {
        None
    };
    Ok(DatasetSummary {
        dir: out.to_path_buf(),
        manifest_hash: manifest.content_hash(),
        counts: manifest.counts,
        labeled_hash,
    })
}

pub fn synthesize(out: &Path, cfg: &RunConfig) -> CliResult<DatasetSummary> {
    let traffic = generate_synthetic_traffic(&cfg.synth)?;
    let data = build_labeled_dataset(&traffic.segments, &cfg.data)?;
    let manifest = save_dataset(out, &data, &cfg.data, Some(&cfg.synth))?;
    Ok(DatasetSummary {
        dir: out.to_path_buf(),
        manifest_hash: manifest.content_hash(),
        counts: manifest.counts,
        labeled_hash: None,
    })
}

/// Loads a labelled dataset from `dir` or from its `labeled` subdirectory.
pub fn load_labeled(dir: &Path) -> CliResult<StoredDataset> {
    let candidate = if dir.join("train.aisl").exists() { dir.to_path_buf() } else { dir.join(LABELED_DIR) };
    if !candidate.join("train.aisl").exists() {
        if !dir.exists() {
            return Err(CliError::usage(format!("dataset directory {} does not exist", dir.display())));
        }
        return Err(CliError::usage(format!(
            "{} holds no labels; run `synthesize` or `preprocess --labeled`",
            dir.display()
        )));
    }
    Ok(load_dataset(&candidate)?)
}

fn samples_of(data: &StoredDataset, test: bool, window_in: usize) -> Vec<Sample> {
    build_samples(if test { &data.test } else { &data.train }, &data.manifest.stats, window_in)
}

fn check_windows(data: &StoredDataset, cfg: &RunConfig) -> CliResult<()> {
    let p = &data.manifest.profile;
    if p.window_in != cfg.model.seq_in || p.window_out != cfg.model.pred_len {
        return Err(CliError::usage(format!(
            "dataset windows are {}+{} steps but the model expects {}+{}",
            p.window_in, p.window_out, cfg.model.seq_in, cfg.model.pred_len
        )));
    }
    Ok(())
}

/// One metrics-log line without its wall-clock time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLine {
    pub epoch: usize,
    pub lr: f64,
    pub train_total: f64,
    pub val_total: f64,
    pub val_traj: f64,
    pub val_anom: f64,
    pub val_coll: f64,
    pub val_expl: f64,
}

impl From<&EpochMetrics> for EpochLine {
    fn from(m: &EpochMetrics) -> Self {
        Self {
            epoch: m.epoch,
            lr: m.lr,
            train_total: m.train_total,
            val_total: m.val_total,
            val_traj: m.val_traj,
            val_anom: m.val_anom,
            val_coll: m.val_coll,
            val_expl: m.val_expl,
        }
    }
}

/// Everything a training run produces except timings, so that reruns
/// with one seed give identical files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub variant: Variant,
    pub label: String,
    pub dataset_hash: String,
    pub config: RunConfig,
    pub parameters: usize,
    pub epochs: Vec<EpochLine>,
    pub best_epoch: usize,
    pub best_val: f64,
    pub stopped_early: bool,
    pub checkpoint_sha256: String,
    pub eval: EvalReport,
}

#[derive(Serialize)]
pub struct TrainSummary<'a> {
    pub variant: &'a str,
    pub epochs: usize,
    pub best_epoch: usize,
    pub best_val: f64,
    pub ade: f64,
    pub baseline_ade: f64,
    pub anomaly_f1: f64,
    pub cri_mae: f64,
    pub explanation_ce: f64,
}

impl TrainReport {
    pub fn summary(&self) -> TrainSummary<'_> {
        TrainSummary {
            variant: self.variant.name(),
            epochs: self.epochs.len(),
            best_epoch: self.best_epoch,
            best_val: self.best_val,
            ade: self.eval.trajectory.ade,
            baseline_ade: self.eval.baseline.ade,
            anomaly_f1: self.eval.anomaly.f1,
            cri_mae: self.eval.cri_mae,
            explanation_ce: self.eval.explanation_ce,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub report: TrainReport,
    pub train_seconds: f64,
    pub eval_seconds: f64,
    pub dir: PathBuf,
}

pub fn train(data_dir: &Path, out: &Path, cfg: &RunConfig, variant: Variant) -> CliResult<TrainOutcome> {
    let data = load_labeled(data_dir)?;
    train_on(&data, out, cfg, variant)
}

/// Trains `variant` on a loaded dataset, then writes the checkpoint,
/// metrics log, config echo and report under `out`.
pub fn train_on(data: &StoredDataset, out: &Path, cfg: &RunConfig, variant: Variant) -> CliResult<TrainOutcome> {
    check_windows(data, cfg)?;
    match cfg.precision {
        Precision::F32 => train_typed::<f32>(data, out, cfg, variant),
        Precision::F64 => train_typed::<f64>(data, out, cfg, variant),
    }
}

fn train_typed<F: Scalar>(data: &StoredDataset, out: &Path, cfg: &RunConfig, variant: Variant) -> CliResult<TrainOutcome> {
    fs::create_dir_all(out)?;
    let model_cfg = cfg.model.clone().with_variant(variant);
    let mut model = Model::<F>::new(model_cfg, cfg.seed)?;
    let train_samples = samples_of(data, false, cfg.model.seq_in);
    let val_samples = samples_of(data, true, cfg.model.seq_in);
    let mut log = fs::File::create(out.join(METRICS_FILE))?;
    let started = Instant::now();
    let fit_report = fit(&mut model, &train_samples, &val_samples, &cfg.train_config(), Some(&mut log))?;
    let train_seconds = started.elapsed().as_secs_f64();

    let mut ckpt = Vec::new();
    model.save(&mut ckpt)?;
    fs::write(out.join(CHECKPOINT_FILE), &ckpt)?;
    fs::write(out.join(CONFIG_ECHO_FILE), cfg.to_toml())?;

    let started = Instant::now();
    let eval = evaluate(&model, &val_samples, &data.manifest.stats, &cfg.eval)?;
    let eval_seconds = started.elapsed().as_secs_f64();
    let report = TrainReport {
        variant,
        label: variant.label().to_string(),
        dataset_hash: data.manifest.content_hash(),
        config: cfg.clone(),
        parameters: model.num_parameters(),
        epochs: fit_report.history.iter().map(EpochLine::from).collect(),
        best_epoch: fit_report.best_epoch,
        best_val: fit_report.best_val,
        stopped_early: fit_report.stopped_early,
        checkpoint_sha256: sha256_hex(&ckpt),
        eval,
    };
    fs::write(out.join(REPORT_FILE), serde_json::to_string_pretty(&report)?)?;
    Ok(TrainOutcome {
        report,
        train_seconds,
        eval_seconds,
        dir: out.to_path_buf(),
    })
}

fn load_checkpoint<F: Scalar>(path: &Path) -> CliResult<Model<F>> {
    let file = fs::File::open(path).map_err(|e| CliError::usage(format!("cannot open {}: {e}", path.display())))?;
    Ok(Model::<F>::load(std::io::BufReader::new(file))?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationOutput {
    pub dataset_hash: String,
    pub checkpoint_sha256: String,
    pub eval: EvalOptionsEcho,
    pub report: EvalReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptionsEcho {
    pub text_samples: usize,
    pub max_explanation_len: usize,
    pub interval_min: f64,
}

pub fn evaluate_checkpoint(data_dir: &Path, checkpoint: &Path, cfg: &RunConfig) -> CliResult<EvaluationOutput> {
    let data = load_labeled(data_dir)?;
    let model: Model<f32> = load_checkpoint(checkpoint)?;
    let samples = samples_of(&data, true, model.config.seq_in);
    let report = evaluate(&model, &samples, &data.manifest.stats, &cfg.eval)?;
    Ok(EvaluationOutput {
        dataset_hash: data.manifest.content_hash(),
        checkpoint_sha256: sha256_hex(&fs::read(checkpoint)?),
        eval: EvalOptionsEcho {
            text_samples: cfg.eval.text_samples,
            max_explanation_len: cfg.eval.max_explanation_len,
            interval_min: cfg.eval.interval_min,
        },
        report,
    })
}

struct Inference {
    data: StoredDataset,
    model: Model<f32>,
    sample: Sample,
    index: usize,
}

fn infer(data_dir: &Path, checkpoint: &Path, window: usize) -> CliResult<Inference> {
    let data = load_labeled(data_dir)?;
    let model: Model<f32> = load_checkpoint(checkpoint)?;
    if window >= data.test.len() {
        return Err(CliError::usage(format!(
            "window {window} out of range; the test split has {} windows",
            data.test.len()
        )));
    }
    let sample = Sample::from_labeled(&data.test[window], &data.manifest.stats, model.config.seq_in);
    Ok(Inference {
        data,
        model,
        sample,
        index: window,
    })
}

pub fn predict_window(data_dir: &Path, checkpoint: &Path, window: usize, cfg: &RunConfig) -> CliResult<serde_json::Value> {
    let inf = infer(data_dir, checkpoint, window)?;
    let stats = &inf.data.manifest.stats;
    let pred = predict(&inf.model, &inf.sample, stats)?;
    let lw = &inf.data.test[inf.index];
    let k = inf.model.config.seq_in;
    let truth = &lw.window.rows[k..];
    let (ade, fde) = ade_fde(
        &pred.trajectory.iter().map(|r| (r[0], r[1])).collect::<Vec<_>>(),
        &truth.iter().map(|r| (r[0], r[1])).collect::<Vec<_>>(),
    )?;
    let input = &lw.window.rows[..k];
    let anomalous = pred.anomaly_prob >= 0.5;
    let mut g = tracks_geojson(input, truth, &pred.trajectory);
    g["outputs"] = serde_json::json!({
        "mmsi": lw.window.mmsi,
        "window": inf.index,
        "start_ts": lw.window.start_ts,
        "anomaly_probability": pred.anomaly_prob,
        "anomalous": anomalous,
        "anomaly_kind": anomalous.then(|| classify_anomaly_kind(input, cfg.eval.interval_min).tag()),
        "cri": pred.cri,
        "ade_nm": ade,
        "fde_nm": fde,
        "reference": {
            "anomaly_label": lw.anomaly_label,
            "anomaly_kind": lw.anomaly_kind().map(|k| k.tag()),
            "cri": lw.cri_target,
        },
    });
    Ok(g)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Briefing {
    pub briefing: String,
    pub generated_explanation: String,
    pub reference_explanation: String,
}

impl Briefing {
    pub fn render(&self) -> String {
        format!(
            "BRIEFING\n{}\n\nGENERATED EXPLANATION\n{}\n\nREFERENCE EXPLANATION\n{}",
            self.briefing, self.generated_explanation, self.reference_explanation
        )
    }
}

pub fn brief_window(data_dir: &Path, checkpoint: &Path, window: usize, cfg: &RunConfig) -> CliResult<Briefing> {
    let inf = infer(data_dir, checkpoint, window)?;
    let stats = &inf.data.manifest.stats;
    let pred = predict(&inf.model, &inf.sample, stats)?;
    let lw = &inf.data.test[inf.index];
    let k = inf.model.config.seq_in;
    let input = &lw.window.rows[..k];
    let truth = &lw.window.rows[k..];
    let (ade, _) = ade_fde(
        &pred.trajectory.iter().map(|r| (r[0], r[1])).collect::<Vec<_>>(),
        &truth.iter().map(|r| (r[0], r[1])).collect::<Vec<_>>(),
    )?;
    let anomalous = pred.anomaly_prob >= 0.5;
    let summary = SituationSummary {
        mmsi: Some(lw.window.mmsi),
        time_range: Some((lw.window.start_ts, lw.window.timestamp(k - 1))),
        current: Some(input[k - 1]),
        predicted: pred.trajectory.last().copied(),
        confidence: Some(confidence_from_ade(ade).to_string()),
        anomalous: Some(anomalous),
        anomaly_kind: anomalous.then(|| classify_anomaly_kind(input, cfg.eval.interval_min)),
        anomaly_time: anomalous.then(|| lw.window.timestamp(anomaly_onset(input, cfg.eval.interval_min))),
        cri: Some(pred.cri.clamp(0.0, 1.0)),
        target_mmsi: lw.encounter.map(|e| e.target_mmsi),
    };
    let generated = generate_explanation(
        &inf.model,
        &inf.sample,
        &pred,
        stats,
        cfg.eval.interval_min,
        cfg.eval.max_explanation_len,
    )?;
    Ok(Briefing {
        briefing: render_briefing(&summary)?,
        generated_explanation: generated,
        reference_explanation: lw.explanation.clone(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub variant: String,
    pub mse: f64,
    pub mae: f64,
    pub ade: f64,
    pub fde: f64,
    pub f1: f64,
    pub cri_mae: f64,
    pub explanation_ce: f64,
}

pub const ABLATION_HEADER: &str = "label\tvariant\tmse\tmae\tade_nm\tfde_nm\tanomaly_f1\tcri_mae\texplanation_ce";

impl AblationRow {
    pub fn from_report(r: &TrainReport) -> Self {
        let e = &r.eval;
        Self {
            label: r.label.clone(),
            variant: r.variant.name().to_string(),
            mse: e.trajectory.mse,
            mae: e.trajectory.mae,
            ade: e.trajectory.ade,
            fde: e.trajectory.fde,
            f1: e.anomaly.f1,
            cri_mae: e.cri_mae,
            explanation_ce: e.explanation_ce,
        }
    }

    pub fn tsv(&self) -> String {
        format!(
            "{}\t{}\t{:.6}\t{:.6}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.4}",
            self.label, self.variant, self.mse, self.mae, self.ade, self.fde, self.f1, self.cri_mae, self.explanation_ce
        )
    }
}

/// Trains `variant` under `<out>/<variant>` and appends its row to the report.
pub fn ablate(data_dir: &Path, out: &Path, cfg: &RunConfig, variant: Variant) -> CliResult<AblationRow> {
    let data = load_labeled(data_dir)?;
    ablate_on(&data, out, cfg, variant)
}

pub fn ablate_on(data: &StoredDataset, out: &Path, cfg: &RunConfig, variant: Variant) -> CliResult<AblationRow> {
    let t = train_on(data, &out.join(variant.name()), cfg, variant)?;
    let row = AblationRow::from_report(&t.report);
    let path = out.join(ABLATION_FILE);
    let fresh = !path.exists();
    let mut f = fs::OpenOptions::new().create(true).append(true).open(&path)?;
    if fresh {
        writeln!(f, "{ABLATION_HEADER}")?;
    }
    writeln!(f, "{}", row.tsv())?;
    Ok(row)
}

/// Manifest of a preprocessed or labelled dataset directory.
pub fn dataset_manifest(dir: &Path) -> CliResult<DatasetManifest> {
    Ok(read_manifest(dir)?)
}
