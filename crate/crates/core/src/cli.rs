//! Command-line dispatch. Every subcommand reads an optional JSON config via
//! `--config`, honours `--seed` and writes its outputs under `--out`.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{OovError, Result};
use crate::harness::{
    demo_composition, prepare_cell, prepare_cell_with, run_benchmark, write_cell_contours, CompositionConfig,
    ExperimentConfig,
};
use crate::moments::central_moments;
use crate::regressor::{train_with_report, FeedforwardRegressor, LossSpec, TrainConfig};
use crate::scm::{resample_joint, sample_joint, seeded_rng, EnvironmentDataset, GeneratingFunction, ScmConfig};
use crate::surface::linspace;
use crate::theory::{default_x2_grid, demo_impossibility};
use crate::transfer::{build_predictor, fit_skew_derivative};

pub const SYNOPSIS: &str = "\
usage: oov <subcommand> [--config FILE] [--seed N] [--out DIR]

subcommands:
  generate            sample source and target environments to CSV
  train-source        fit the source regressor on a source CSV
  zeroshot            fit the source and slope models and build the zero-shot predictor
  benchmark           run every method over classes and seeds and write report.csv
  contour             write contour_<method>.csv grids for one class and seed
  demo-impossibility  run the binary non-identifiability construction
  demo-composition    compose two source regressors through a shared child";

#[derive(Parser, Debug)]
#[command(name = "oov", about = "Out-of-variable zero-shot transfer experiments", override_usage = "oov <subcommand> [--config FILE] [--seed N] [--out DIR]")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// JSON configuration file; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed(s).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    Generate(Common),
    TrainSource(Common),
    Zeroshot(Common),
    Benchmark(Common),
    Contour(Common),
    DemoImpossibility(Common),
    DemoComposition(Common),
}

/// `generate` settings. Without `function`, coefficients are drawn from
/// N(0, 1) for `class`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerateConfig {
    pub class: String,
    pub function: Option<GeneratingFunction>,
    pub source_size: usize,
    pub target_size: usize,
    pub scm: ScmConfig,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self { class: "polynomial".into(), function: None, source_size: 100_000, target_size: 50, scm: ScmConfig::default() }
    }
}

impl GenerateConfig {
    fn function(&self) -> Result<GeneratingFunction> {
        match &self.function {
            Some(f) => Ok(f.clone()),
            None => Ok(GeneratingFunction::random(self.class.parse()?, &mut seeded_rng(self.scm.seed ^ 0xA1FA))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSourceConfig {
    /// CSV with columns `X1, X2, Y`.
    pub source: PathBuf,
    pub training: TrainConfig,
}

impl Default for TrainSourceConfig {
    fn default() -> Self {
        Self { source: PathBuf::from("out/source.csv"), training: TrainConfig::default().with_epochs(40).with_learning_rate(3e-3) }
    }
}

/// `zeroshot` settings. Environments come from CSV files when both paths
/// are set, otherwise they are generated from `generate`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ZeroShotConfig {
    pub source: Option<PathBuf>,
    pub target: Option<PathBuf>,
    pub generate: GenerateConfig,
    pub pool_size: usize,
    pub source_training: TrainConfig,
    pub derivative_training: TrainConfig,
}

impl Default for ZeroShotConfig {
    fn default() -> Self {
        let t = TrainConfig::default().with_epochs(40).with_learning_rate(3e-3);
        Self { source: None, target: None, generate: GenerateConfig::default(), pool_size: 1000, source_training: t.clone(), derivative_training: t }
    }
}

/// `contour` settings: one cell of the benchmark, optionally with fixed coefficients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContourConfig {
    pub class: String,
    pub seed: u64,
    pub function: Option<GeneratingFunction>,
    pub experiment: ExperimentConfig,
}

impl Default for ContourConfig {
    fn default() -> Self {
        Self { class: "polynomial".into(), seed: 0, function: None, experiment: ExperimentConfig::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ImpossibilityConfig {
    pub instances: usize,
    pub x2_grid: Vec<f64>,
    pub seed: u64,
}

impl Default for ImpossibilityConfig {
    fn default() -> Self {
        Self { instances: 100, x2_grid: default_x2_grid(), seed: 0 }
    }
}

fn load_config<T: DeserializeOwned + Default>(path: &Option<PathBuf>) -> Result<T> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| OovError::InvalidConfig(format!("cannot read {}: {e}", p.display())))?;
            Ok(serde_json::from_str(&text)?)
        }
        None => Ok(T::default()),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn generate(common: &Common) -> Result<String> {
    let mut cfg: GenerateConfig = load_config(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.scm.seed = seed;
    }
    let func = cfg.function()?;
    let (joint, transform) = sample_joint(&cfg.scm, &func, cfg.source_size)?;
    let target = resample_joint(&cfg.scm.clone().with_seed(cfg.scm.seed ^ 0x7A67), &transform, &func, cfg.target_size)?;
    fs::create_dir_all(&common.out)?;
    joint.project(&["X1", "X2"], true)?.save_csv(&common.out.join("source.csv"))?;
    target.project(&["X2", "X3"], false)?.save_csv(&common.out.join("target.csv"))?;
    write_json(&common.out.join("function.json"), &func)?;
    write_json(&common.out.join("transform.json"), &transform)?;
    Ok(format!("wrote {} source and {} target rows to {}", cfg.source_size, cfg.target_size, common.out.display()))
}

#[derive(Serialize)]
struct TrainSourceReport {
    rows: usize,
    epoch_losses: Vec<f64>,
}

fn train_source(common: &Common) -> Result<String> {
    let mut cfg: TrainSourceConfig = load_config(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.training.seed = seed;
    }
    let source = EnvironmentDataset::load_csv(&cfg.source)?;
    let x = source.select(&["X1", "X2"])?;
    let (model, report) = train_with_report(&x, source.require_target()?, LossSpec::MeanSquared, &cfg.training)?;
    fs::create_dir_all(&common.out)?;
    model.save(&common.out.join("f_s.json"))?;
    write_json(&common.out.join("train_report.json"), &TrainSourceReport { rows: source.n_rows(), epoch_losses: report.epoch_losses.clone() })?;
    Ok(format!("source model trained on {} rows, final loss {:.6}", source.n_rows(), report.final_loss()))
}

#[derive(Serialize)]
struct ZeroShotReport {
    source_rows: usize,
    target_rows: usize,
    mu3: f64,
    k3: f64,
    k3_standard_error: Option<f64>,
    pool_size: usize,
    source_final_loss: f64,
}

fn zeroshot(common: &Common) -> Result<String> {
    let mut cfg: ZeroShotConfig = load_config(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.generate.scm.seed = seed;
        cfg.source_training.seed = seed;
        cfg.derivative_training.seed = seed.wrapping_add(1);
    }
    let (source, target) = match (&cfg.source, &cfg.target) {
        (Some(s), Some(t)) => (EnvironmentDataset::load_csv(s)?, EnvironmentDataset::load_csv(t)?),
        (None, None) => {
            let g = &cfg.generate;
            let func = g.function()?;
            let (joint, transform) = sample_joint(&g.scm, &func, g.source_size)?;
            let target = resample_joint(&g.scm.clone().with_seed(g.scm.seed ^ 0x7A67), &transform, &func, g.target_size)?;
            (joint.project(&["X1", "X2"], true)?, target.project(&["X2", "X3"], false)?)
        }
        _ => return Err(OovError::InvalidConfig("set both `source` and `target` paths or neither".into())),
    };
    let x3 = central_moments(&target.column("X3")?.to_vec(), 6)?;
    let x = source.select(&["X1", "X2"])?;
    let (f_s, report): (FeedforwardRegressor, _) =
        train_with_report(&x, source.require_target()?, LossSpec::MeanSquared, &cfg.source_training)?;
    let dm = fit_skew_derivative(&source, &f_s, &x3, &cfg.derivative_training)?;
    let predictor = build_predictor(f_s, dm, &source, cfg.pool_size, cfg.source_training.seed ^ 0x9001)?;
    fs::create_dir_all(&common.out)?;
    write_json(&common.out.join("predictor.json"), &predictor)?;
    write_json(
        &common.out.join("zeroshot_report.json"),
        &ZeroShotReport {
            source_rows: source.n_rows(),
            target_rows: target.n_rows(),
            mu3: x3.mean,
            k3: x3.skew(),
            k3_standard_error: x3.skew_standard_error(),
            pool_size: cfg.pool_size,
            source_final_loss: report.final_loss(),
        },
    )?;
    Ok(format!("zero-shot predictor written to {}", common.out.join("predictor.json").display()))
}

fn benchmark(common: &Common) -> Result<String> {
    let mut cfg: ExperimentConfig = load_config(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seeds = vec![seed];
    }
    cfg.out_dir = Some(common.out.clone());
    let report = run_benchmark(&cfg)?;
    Ok(format!(
        "{} cells written to {} in {:.1}s",
        report.cells.len(),
        common.out.join("report.csv").display(),
        report.summary.total_runtime_secs
    ))
}

fn contour(common: &Common) -> Result<String> {
    let mut cfg: ContourConfig = load_config(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.experiment.validate()?;
    let cell = match &cfg.function {
        Some(f) => prepare_cell_with(&cfg.experiment, f.clone(), cfg.seed)?,
        None => prepare_cell(&cfg.experiment, cfg.class.parse()?, cfg.seed)?,
    };
    write_cell_contours(&cell, &common.out)?;
    Ok(format!("contour grids written to {}", common.out.display()))
}

fn impossibility(common: &Common) -> Result<String> {
    let mut cfg: ImpossibilityConfig = load_config(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if cfg.x2_grid.is_empty() {
        cfg.x2_grid = linspace(0.0, 5.0, 21);
    }
    let report = demo_impossibility(cfg.instances, &cfg.x2_grid, cfg.seed)?;
    fs::create_dir_all(&common.out)?;
    write_json(&common.out.join("impossibility.json"), &report)?;
    Ok(format!(
        "{} instances: max residual {:.3e}, min distance {:.3}",
        report.instances.len(),
        report.max_residual,
        report.min_distance
    ))
}

fn composition(common: &Common) -> Result<String> {
    let mut cfg: CompositionConfig = load_config(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seeds = vec![seed];
    }
    let report = demo_composition(&cfg)?;
    fs::create_dir_all(&common.out)?;
    write_json(&common.out.join("composition.json"), &report)?;
    let parts: Vec<String> = report.medians.iter().map(|(sd, m)| format!("sd {sd}: median MSE {m:.3e}")).collect();
    Ok(parts.join(", "))
}

/// Parses `args` (including the program name) and runs the subcommand.
/// Returns the process exit code.
pub fn dispatch<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(stdout, "{e}");
                return 0;
            }
            let _ = writeln!(stderr, "{}", e.render().to_string().lines().next().unwrap_or("invalid arguments"));
            let _ = writeln!(stderr, "{SYNOPSIS}");
            return 2;
        }
    };
    let result = match &cli.command {
        Command::Generate(c) => generate(c),
        Command::TrainSource(c) => train_source(c),
        Command::Zeroshot(c) => zeroshot(c),
        Command::Benchmark(c) => benchmark(c),
        Command::Contour(c) => contour(c),
        Command::DemoImpossibility(c) => impossibility(c),
        Command::DemoComposition(c) => composition(c),
    };
    match result {
        Ok(msg) => {
            let _ = writeln!(stdout, "{msg}");
            0
        }
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            1
        }
    }
}
