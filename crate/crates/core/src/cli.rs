//! The `soc-cnn` command line: `synth`, `train`, `transfer` and `eval`.
//!
//! Every run writes a plain-text `key=value` manifest holding the resolved
//! configuration, the seed and the SHA-256 of each artifact it produced.
//!
//! Exit codes: 0 success, 1 I/O or other failure, 2 usage or validation
//! error, 3 missing dataset cycles, 4 non-finite loss, 5 model/spec mismatch.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;
use sha2::{Digest, Sha256};

use crate::data::{
    assemble_recipe, dataset_dir, decimation_factor, downsample, load_cycles, prepare_windows, DatasetKind, NoiseKind,
    NoiseSpec, RecipeManifest, RecipeOptions, TEST_NOISE_STREAM,
};
use crate::error::{Error, Result};
use crate::model::{write_atomic, ArchKind, ArchSpec, CnnModel};
use crate::numerics::Rng;
use crate::synth::{generate_dataset, SynthDatasetOptions};
use crate::training::{evaluate, train, transfer_init, FreezePolicy, LabelOracle, MetricsReport, SocPredictor, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_MISSING_CYCLES: i32 = 3;
pub const EXIT_NON_FINITE: i32 = 4;
pub const EXIT_SPEC_MISMATCH: i32 = 5;

// Seed streams split off the one --seed value.
const MODEL_STREAM: u64 = 1;
const DATA_STREAM: u64 = 2;
const TRAIN_STREAM: u64 = 3;

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::InvalidSpec(_) | Error::InvalidArgument(_) | Error::WindowTooSmall { .. } => EXIT_USAGE,
        Error::MissingCycles(_) => EXIT_MISSING_CYCLES,
        Error::NonFiniteLoss { .. } => EXIT_NON_FINITE,
        Error::SpecMismatch(_) => EXIT_SPEC_MISMATCH,
        _ => EXIT_FAILURE,
    }
}

#[derive(Debug, Parser)]
#[command(name = "soc-cnn", version, about = "Battery state-of-charge estimation with a windowed 1D CNN")]
pub struct Cli {
    /// Master seed; every random draw in the run derives from it.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Where to write the run manifest (defaults next to the main artifact).
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset (cycle CSVs and recipe).
    Synth(SynthArgs),
    /// Train a model from scratch on a dataset recipe.
    Train(TrainArgs),
    /// Fine-tune the conv layers of a trained model on another dataset.
    Transfer(TransferArgs),
    /// Report MAE / MAX / MSE of a model on the test cycles.
    Eval(EvalArgs),
}

fn parse_synth_preset(s: &str) -> std::result::Result<DatasetKind, String> {
    match s.parse::<DatasetKind>() {
        Ok(k @ (DatasetKind::SynthA | DatasetKind::SynthB)) => Ok(k),
        _ => Err(format!("unknown preset {s:?}; expected synthA or synthB")),
    }
}

fn parse_dataset(s: &str) -> std::result::Result<DatasetKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_arch(s: &str) -> std::result::Result<ArchKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_noise(s: &str) -> std::result::Result<NoiseKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, value_parser = parse_synth_preset, default_value = "synthA")]
    pub preset: DatasetKind,
    /// Dataset root; files go to <out-dir>/<preset>/.
    #[arg(long, default_value = "data")]
    pub out_dir: PathBuf,
    /// Duration of every generated cycle in seconds.
    #[arg(long, default_value_t = 4000.0)]
    pub duration: f64,
    #[arg(long, default_value_t = 10.0)]
    pub hz: f64,
}

#[derive(Debug, Args, Clone)]
pub struct DataArgs {
    #[arg(long, default_value = "data")]
    pub data_root: PathBuf,
    #[arg(long, value_parser = parse_dataset)]
    pub dataset: DatasetKind,
    /// Sampling rate after decimation.
    #[arg(long, default_value_t = 1.0)]
    pub hz: f64,
    #[arg(long, value_parser = parse_noise, default_value = "none")]
    pub noise: NoiseKind,
}

#[derive(Debug, Args, Clone)]
pub struct ModelArgs {
    /// Window length in samples; must be a positive multiple of 10.
    #[arg(long, default_value_t = 500)]
    pub tw: usize,
    #[arg(long, value_parser = parse_arch, default_value = "dense-first")]
    pub arch: ArchKind,
    #[arg(long, default_value_t = 2)]
    pub conv_layers: usize,
}

#[derive(Debug, Args, Clone)]
pub struct FitArgs {
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    #[arg(long, default_value_t = 128)]
    pub batch: usize,
    #[arg(long, default_value_t = 10)]
    pub patience: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long)]
    pub model_out: PathBuf,
    /// Training-curve CSV (defaults to <model-out>.train.csv).
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub fit: FitArgs,
}

#[derive(Debug, Args)]
pub struct TransferArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub fit: FitArgs,
    #[arg(long)]
    pub source_model: PathBuf,
    /// Keep each training cycle with this probability.
    #[arg(long)]
    pub keep_prob: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, required_unless_present = "oracle")]
    pub model: Option<PathBuf>,
    /// Expected window length; must match the model's.
    #[arg(long)]
    pub tw: Option<usize>,
    /// Metrics CSV path; the CSV is always printed to stdout too.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Score the label oracle instead of a model (window length from --tw).
    #[arg(long, hide = true)]
    pub oracle: bool,
}

/// Parses `args` and runs the selected subcommand. Returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match run(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Synth(a) => cmd_synth(cli, a),
        Command::Train(a) => cmd_train(cli, a),
        Command::Transfer(a) => cmd_transfer(cli, a),
        Command::Eval(a) => cmd_eval(cli, a),
    }
}

/// Resolved configuration and artifact digests of one run.
#[derive(Debug, Default)]
pub struct RunManifest {
    entries: BTreeMap<String, String>,
}

impl RunManifest {
    fn new(subcommand: &str, seed: u64) -> Self {
        let mut m = Self::default();
        m.set("subcommand", subcommand);
        m.set("seed", seed);
        m.set("version", env!("CARGO_PKG_VERSION"));
        m
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    fn artifact(&mut self, key: &str, path: &Path) -> Result<()> {
        self.set(&format!("artifact.{key}.path"), path.display());
        self.set(&format!("artifact.{key}.sha256"), sha256_file(path)?);
        Ok(())
    }

    pub fn to_text(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_text().as_bytes())?;
        info!("manifest written to {}", path.display());
        Ok(())
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let digest = Sha256::digest(fs::read(path)?);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(())
}

fn cmd_synth(cli: &Cli, a: &SynthArgs) -> Result<()> {
    if !(a.duration > 0.0) || !(a.hz > 0.0) {
        return Err(Error::InvalidArgument("--duration and --hz must be positive".into()));
    }
    let opts = SynthDatasetOptions {
        seed: cli.seed,
        duration_s: a.duration,
        sampling_hz: a.hz,
    };
    let files = generate_dataset(&a.out_dir, a.preset, &opts)?;
    info!("wrote {} cycle files for {}", files.len(), a.preset);

    let mut m = RunManifest::new("synth", cli.seed);
    m.set("preset", a.preset);
    m.set("out_dir", a.out_dir.display());
    m.set("duration_s", a.duration);
    m.set("sampling_hz", a.hz);
    let dir = dataset_dir(&a.out_dir, a.preset);
    m.artifact("recipe", &dir.join(crate::data::MANIFEST_FILE))?;
    for f in &files {
        let rel = f.strip_prefix(&dir).unwrap_or(f).display().to_string();
        m.artifact(&rel, f)?;
    }
    let path = cli.manifest.clone().unwrap_or_else(|| dir.join("run.manifest"));
    m.write(&path)
}

fn record_data(m: &mut RunManifest, d: &DataArgs) {
    m.set("data_root", d.data_root.display());
    m.set("dataset", d.dataset);
    m.set("sampling_hz", d.hz);
    m.set("noise", d.noise);
}

fn record_model(m: &mut RunManifest, spec: &ArchSpec) {
    m.set("arch", spec.arch);
    m.set("conv_layers", spec.conv_layers);
    m.set("t_w", spec.t_w);
}

fn record_fit(m: &mut RunManifest, f: &FitArgs) {
    m.set("epochs", f.epochs);
    m.set("batch", f.batch);
    m.set("patience", f.patience);
    m.set("lr", f.lr);
}

fn train_config(f: &FitArgs, seed: u64, freeze: FreezePolicy) -> Result<TrainConfig> {
    let config = TrainConfig {
        batch_size: f.batch,
        max_epochs: f.epochs,
        patience: f.patience.min(f.epochs),
        learning_rate: f.lr,
        seed,
        freeze,
        ..TrainConfig::default()
    };
    config.validate()?;
    Ok(config)
}

fn target_spec(m: &ModelArgs) -> Result<ArchSpec> {
    let spec = ArchSpec::new(m.arch, m.conv_layers, m.tw);
    spec.validate()?;
    Ok(spec)
}

/// Shared tail of `train` and `transfer`: fit, then write model, report and manifest.
fn fit_and_save(cli: &Cli, model: CnnModel, data: &DataArgs, fit: &FitArgs, keep_prob: Option<f64>, freeze: FreezePolicy, mut m: RunManifest) -> Result<()> {
    let config = train_config(fit, cli.seed, freeze)?;
    let manifest = RecipeManifest::load_or_default(&data.data_root, data.dataset)?;
    let opts = RecipeOptions {
        sampling_hz: data.hz,
        t_w: model.spec.t_w,
        noise: NoiseSpec::new(data.noise),
        keep_prob,
        norm_override: None,
    };
    let master = Rng::new(cli.seed);
    let prepared = assemble_recipe(&data.data_root, &manifest, &opts, &mut master.fork(DATA_STREAM))?;
    info!(
        "{} windows: {} train / {} val / {} test",
        data.dataset,
        prepared.train.len(),
        prepared.val.len(),
        prepared.test.len()
    );
    m.set(
        "train_cycles",
        prepared.split.train.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(","),
    );

    let mut model = model;
    model.norm_stats = prepared.norm;
    let (trained, mut report) = train(model, &prepared.train, &prepared.val, &config, &mut master.fork(TRAIN_STREAM))?;
    report.provenance.insert("dataset".into(), data.dataset.to_string());
    report.provenance.insert("noise".into(), data.noise.to_string());
    report.provenance.insert("sampling_hz".into(), data.hz.to_string());
    report.provenance.insert("t_w".into(), trained.spec.t_w.to_string());
    report.provenance.insert("arch".into(), trained.spec.arch.to_string());
    report.provenance.insert("conv_layers".into(), trained.spec.conv_layers.to_string());

    ensure_parent(&fit.model_out)?;
    trained.save(&fit.model_out)?;
    let report_path = fit.report.clone().unwrap_or_else(|| with_suffix(&fit.model_out, ".train.csv"));
    ensure_parent(&report_path)?;
    write_atomic(&report_path, report.to_csv().as_bytes())?;
    info!(
        "best epoch {} of {} (val mse {:.3e}); model saved to {}",
        report.best_epoch,
        report.stop_epoch,
        report.best_val_mse,
        fit.model_out.display()
    );

    m.set("stop_epoch", report.stop_epoch);
    m.set("best_epoch", report.best_epoch);
    m.set("best_val_mse", report.best_val_mse);
    m.artifact("model", &fit.model_out)?;
    m.artifact("report", &report_path)?;
    let path = cli.manifest.clone().unwrap_or_else(|| with_suffix(&fit.model_out, ".manifest"));
    m.write(&path)
}

fn cmd_train(cli: &Cli, a: &TrainArgs) -> Result<()> {
    let spec = target_spec(&a.model)?;
    train_config(&a.fit, cli.seed, FreezePolicy::None)?;
    let mut model = CnnModel::build(spec, &mut Rng::new(cli.seed).fork(MODEL_STREAM))?;
    model.seed = cli.seed;
    let mut m = RunManifest::new("train", cli.seed);
    record_data(&mut m, &a.data);
    record_model(&mut m, &model.spec);
    record_fit(&mut m, &a.fit);
    fit_and_save(cli, model, &a.data, &a.fit, None, FreezePolicy::None, m)
}

fn cmd_transfer(cli: &Cli, a: &TransferArgs) -> Result<()> {
    let spec = target_spec(&a.model)?;
    train_config(&a.fit, cli.seed, FreezePolicy::DenseFrozen)?;
    if let Some(p) = a.keep_prob {
        if !(p > 0.0 && p <= 1.0) {
            return Err(Error::InvalidArgument(format!("--keep-prob {p} is outside (0, 1]")));
        }
    }
    let source = CnnModel::load(&a.source_model)?;
    let model = transfer_init(&spec, &source)?;
    let mut m = RunManifest::new("transfer", cli.seed);
    record_data(&mut m, &a.data);
    record_model(&mut m, &model.spec);
    record_fit(&mut m, &a.fit);
    m.artifact("source_model", &a.source_model)?;
    if let Some(p) = a.keep_prob {
        m.set("keep_prob", p);
    }
    fit_and_save(cli, model, &a.data, &a.fit, a.keep_prob, FreezePolicy::DenseFrozen, m)
}

fn cmd_eval(cli: &Cli, a: &EvalArgs) -> Result<()> {
    let (predictor, t_w, norm): (Box<dyn SocPredictor>, usize, _) = match (&a.model, a.oracle) {
        (_, true) => {
            let t_w = a.tw.ok_or_else(|| Error::InvalidArgument("--oracle needs --tw".into()))?;
            (Box::new(LabelOracle), t_w, None)
        }
        (Some(path), false) => {
            let model = CnnModel::load(path)?;
            if let Some(tw) = a.tw {
                if tw != model.spec.t_w {
                    return Err(Error::SpecMismatch(format!(
                        "--tw {tw} but the model was trained with t_w = {}",
                        model.spec.t_w
                    )));
                }
            }
            let (t_w, norm) = (model.spec.t_w, model.norm_stats);
            (Box::new(model), t_w, Some(norm))
        }
        (None, false) => return Err(Error::InvalidArgument("--model is required".into())),
    };

    let manifest = RecipeManifest::load_or_default(&a.data.data_root, a.data.dataset)?;
    let split = manifest.split()?;
    let factor = decimation_factor(manifest.native_hz, a.data.hz)?;
    let cycles = load_cycles(&a.data.data_root, &manifest, &split.test)?
        .iter()
        .map(|c| downsample(c, factor))
        .collect::<Result<Vec<_>>>()?;
    let norm = match norm {
        Some(n) => n,
        None => crate::data::NormStats::identity(),
    };
    let noise = NoiseSpec::new(a.data.noise);
    let windows = prepare_windows(&cycles, &norm, &noise, t_w, &Rng::new(cli.seed).fork(DATA_STREAM), TEST_NOISE_STREAM);
    let report: MetricsReport = evaluate(predictor.as_ref(), &windows)?;
    let csv = report.to_csv();
    print!("{csv}");

    let mut m = RunManifest::new("eval", cli.seed);
    record_data(&mut m, &a.data);
    m.set("t_w", t_w);
    m.set("oracle", a.oracle);
    if let Some(p) = &a.model {
        m.artifact("model", p)?;
    }
    m.set("mae_pct", report.aggregate.mae_pct);
    m.set("max_pct", report.aggregate.max_pct);
    let default_manifest = match &a.report {
        Some(path) => {
            ensure_parent(path)?;
            write_atomic(path, csv.as_bytes())?;
            m.artifact("report", path)?;
            Some(with_suffix(path, ".manifest"))
        }
        None => a.model.as_ref().map(|p| with_suffix(p, ".eval.manifest")),
    };
    match cli.manifest.clone().or(default_manifest) {
        Some(path) => m.write(&path),
        None => {
            info!("no --report or --manifest; manifest not written");
            Ok(())
        }
    }
}
