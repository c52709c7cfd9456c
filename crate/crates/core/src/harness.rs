//! Benchmark orchestration: data generation, all methods, grid losses,
//! the from-scratch sample-efficiency sweep, and CSV/JSON reports.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::baselines::{finetune_baseline, marginal_baseline, optimal_baseline, BaselinePredictor, SlotMapping};
use crate::error::{OovError, Result};
use crate::moments::{central_moments, MomentSummary};
use crate::regressor::{train, FeedforwardRegressor, LossSpec, TrainConfig};
use crate::scm::{
    derive_seed, resample_joint, sample_joint, seeded_rng, EnvironmentDataset, FunctionClass, GeneratingFunction,
    sample_mediated, MediatedConfig, ScmConfig, StandardizationTransform,
};
use crate::surface::{linspace, TargetPredictor};
use crate::transfer::{build_predictor, compose_possibility, fit_skew_derivative_with, SkewFitOptions, ZeroShotPredictor, SKEW_DEGENERACY_THRESHOLD};

pub const METHODS: [&str; 4] = ["Proposed", "Optimal", "Marginal", "FineTune"];
pub const FROM_SCRATCH: &str = "FromScratch";
pub const FLAG_SKEW_DEGENERATE: &str = "skew_degenerate";

/// Evaluation region for the grid loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GridSpec {
    /// Per-axis `[lower, upper]` quantiles of the covariate distribution.
    Quantile { lower: f64, upper: f64 },
    /// Fixed box `[lo, hi]²`.
    Box { lo: f64, hi: f64 },
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec::Quantile { lower: 0.05, upper: 0.95 }
    }
}

/// Training configuration for each model role.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RoleConfigs {
    pub source: TrainConfig,
    pub derivative: TrainConfig,
    pub optimal: TrainConfig,
    /// Budget models keep this configuration but rescale epochs to match
    /// the optimal model's number of gradient steps.
    pub from_scratch: TrainConfig,
}

impl Default for RoleConfigs {
    fn default() -> Self {
        let base = TrainConfig::default().with_epochs(40).with_learning_rate(3e-3);
        Self { source: base.clone(), derivative: base.clone(), optimal: base.clone(), from_scratch: base }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Any of `polynomial`, `nonlinear`, `trigonometric`, or `all`.
    pub classes: Vec<String>,
    pub seeds: Vec<u64>,
    pub source_size: usize,
    /// Target-environment covariate rows used for the `X3` moments.
    pub target_covariate_size: usize,
    pub pool_size: usize,
    /// Target joint rows for the Optimal baseline.
    pub optimal_size: usize,
    pub budgets: Vec<usize>,
    /// `X1` draws for the Monte-Carlo reference of non-polynomial classes.
    pub reference_draws: usize,
    pub grid_resolution: usize,
    pub grid: GridSpec,
    /// `|k3|` below this flags the cell instead of fitting the slope model.
    pub skew_threshold: f64,
    pub scm: ScmConfig,
    pub training: RoleConfigs,
    pub write_contours: bool,
    pub out_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            classes: vec!["all".into()],
            seeds: (0..5).collect(),
            source_size: 100_000,
            target_covariate_size: 50,
            pool_size: 1000,
            optimal_size: 100_000,
            budgets: vec![10, 100, 1000, 10_000],
            reference_draws: 1_000_000,
            grid_resolution: 50,
            grid: GridSpec::default(),
            skew_threshold: SKEW_DEGENERACY_THRESHOLD,
            scm: ScmConfig::default(),
            training: RoleConfigs::default(),
            write_contours: false,
            out_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn function_classes(&self) -> Result<Vec<FunctionClass>> {
        let mut out = Vec::new();
        for name in &self.classes {
            let chosen: Vec<FunctionClass> =
                if name == "all" { FunctionClass::ALL.to_vec() } else { vec![name.parse()?] };
            for c in chosen {
                if !out.contains(&c) {
                    out.push(c);
                }
            }
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        if self.function_classes()?.is_empty() {
            return Err(OovError::InvalidConfig("at least one function class is required".into()));
        }
        if self.seeds.is_empty() {
            return Err(OovError::InvalidConfig("seed list must be non-empty".into()));
        }
        for (name, v) in [
            ("source_size", self.source_size),
            ("pool_size", self.pool_size),
            ("optimal_size", self.optimal_size),
            ("reference_draws", self.reference_draws),
        ] {
            if v == 0 {
                return Err(OovError::InvalidConfig(format!("{name} must be at least 1")));
            }
        }
        if self.target_covariate_size < 2 {
            return Err(OovError::InvalidConfig("target_covariate_size must be at least 2".into()));
        }
        if self.grid_resolution < 2 {
            return Err(OovError::InvalidConfig("grid_resolution must be at least 2".into()));
        }
        if self.budgets.contains(&0) {
            return Err(OovError::InvalidConfig("budgets must be at least 1".into()));
        }
        match self.grid {
            GridSpec::Quantile { lower, upper } if !(0.0 <= lower && lower < upper && upper <= 1.0) => {
                return Err(OovError::InvalidConfig(format!("grid quantiles need 0 <= lower < upper <= 1, got ({lower}, {upper})")));
            }
            GridSpec::Box { lo, hi } if !(lo < hi) => {
                return Err(OovError::InvalidConfig(format!("grid box needs lo < hi, got [{lo}, {hi}]")));
            }
            _ => {}
        }
        if !(self.skew_threshold >= 0.0) {
            return Err(OovError::InvalidConfig("skew_threshold must be non-negative".into()));
        }
        self.scm.validate()?;
        for cfg in [&self.training.source, &self.training.derivative, &self.training.optimal, &self.training.from_scratch] {
            cfg.validate()?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg: Self = serde_json::from_str(&fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// `(loss_m − loss_o) / loss_o`.
pub fn percentage_loss(loss_m: f64, loss_o: f64) -> Result<f64> {
    if !(loss_o > 0.0) {
        return Err(OovError::ZeroDenominator(loss_o));
    }
    Ok((loss_m - loss_o) / loss_o)
}

/// Evaluation grid with the reference `f_T` on it.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalGrid {
    pub x2: Vec<f64>,
    pub x3: Vec<f64>,
    pub reference: Array2<f64>,
}

impl EvalGrid {
    pub fn mse<P: TargetPredictor + ?Sized>(&self, predictor: &P) -> f64 {
        let pred = predictor.predict_grid(&self.x2, &self.x3);
        (&pred - &self.reference).mapv(|v| v * v).mean().expect("non-empty grid")
    }
}

fn quantile(values: &[f64], q: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Reference `f_T(x2, x3) = E_{X1}[φ(X1, x2, x3)]`: closed form for the
/// polynomial class, Monte Carlo over `x1_draws` otherwise.
pub fn reference_target(
    func: &GeneratingFunction,
    mu1: f64,
    x1_draws: &[f64],
    x2: &[f64],
    x3: &[f64],
) -> Result<Array2<f64>> {
    if func.class() == FunctionClass::Polynomial {
        let p = crate::scm::analytic_target_predictor(func, mu1)?;
        return Ok(p.predict_grid(x2, x3));
    }
    if x1_draws.is_empty() {
        return Err(OovError::Empty("reference X1 draws"));
    }
    let n = x1_draws.len() as f64;
    Ok(Array2::from_shape_fn((x2.len(), x3.len()), |(i, j)| {
        x1_draws.iter().map(|&a| func.eval(a, x2[i], x3[j])).sum::<f64>() / n
    }))
}

/// Everything a (class, seed) cell produces before scoring.
pub struct CellArtifacts {
    pub class: FunctionClass,
    pub seed: u64,
    pub function: GeneratingFunction,
    pub transform: StandardizationTransform,
    pub source: EnvironmentDataset,
    pub x3_moments: MomentSummary,
    /// Population third central moment of the standardized `X3`.
    pub k3_population: f64,
    pub f_s: FeedforwardRegressor,
    pub proposed: Result<ZeroShotPredictor>,
    pub optimal: BaselinePredictor,
    pub marginal: BaselinePredictor,
    pub finetune: BaselinePredictor,
    pub grid: EvalGrid,
}

impl CellArtifacts {
    pub fn predictor(&self, method: &str) -> Option<&dyn TargetPredictor> {
        match method {
            "Proposed" => self.proposed.as_ref().ok().map(|p| p as &dyn TargetPredictor),
            "Optimal" => Some(&self.optimal),
            "Marginal" => Some(&self.marginal),
            "FineTune" => Some(&self.finetune),
            _ => None,
        }
    }
}

fn cell_seed(seed: u64, class: FunctionClass) -> u64 {
    let idx = FunctionClass::ALL.iter().position(|c| *c == class).expect("known class") as u64;
    derive_seed(seed, 1000 + idx)
}

fn role(cfg: &TrainConfig, seed: u64) -> TrainConfig {
    cfg.clone().with_seed(seed)
}

/// Generates environments, trains every method and builds the reference grid
/// for one cell.
pub fn prepare_cell(config: &ExperimentConfig, class: FunctionClass, seed: u64) -> Result<CellArtifacts> {
    let base = cell_seed(seed, class);
    let function = GeneratingFunction::random(class, &mut seeded_rng(derive_seed(base, 1)));
    prepare_cell_with(config, function, seed)
}

/// As [`prepare_cell`] with a fixed mechanism.
pub fn prepare_cell_with(config: &ExperimentConfig, function: GeneratingFunction, seed: u64) -> Result<CellArtifacts> {
    let class = function.class();
    let base = cell_seed(seed, class);
    let scm = |stream: u64| config.scm.clone().with_seed(derive_seed(base, stream));

    let (joint, transform) = sample_joint(&scm(2), &function, config.source_size)?;
    let source = joint.project(&["X1", "X2"], true)?;
    let target = resample_joint(&scm(3), &transform, &function, config.target_covariate_size)?;
    let x3_moments = central_moments(&target.column("X3")?.to_vec(), 6)?;
    let k3_population = transform.central_moment_of(2, &config.scm.covariates, 3)?;

    let x = source.select(&["X1", "X2"])?;
    let f_s = train(&x, source.require_target()?, LossSpec::MeanSquared, &role(&config.training.source, derive_seed(base, 10)))?;
    let options = SkewFitOptions { degeneracy_threshold: config.skew_threshold, ..SkewFitOptions::default() };
    let proposed = match fit_skew_derivative_with(
        &source,
        &f_s,
        &x3_moments,
        &role(&config.training.derivative, derive_seed(base, 11)),
        &options,
    ) {
        Ok(dm) => Ok(build_predictor(f_s.clone(), dm, &source, config.pool_size, derive_seed(base, 12))?),
        Err(e @ OovError::SkewDegenerate { .. }) => Err(e),
        Err(e) => return Err(e),
    };
    let pool = match &proposed {
        Ok(p) => p.pool.clone(),
        Err(_) => crate::transfer::sample_pool(&source, config.pool_size, derive_seed(base, 12))?,
    };
    let optimal_joint = resample_joint(&scm(4), &transform, &function, config.optimal_size)?;
    let optimal = optimal_baseline(&optimal_joint, &role(&config.training.optimal, derive_seed(base, 13)))?;
    let marginal = marginal_baseline(f_s.clone(), pool)?;
    let finetune = finetune_baseline(f_s.clone(), SlotMapping::default());

    let reference_sample = resample_joint(&scm(5), &transform, &function, config.reference_draws)?;
    let x1_draws = reference_sample.column("X1")?.to_vec();
    let res = config.grid_resolution;
    let (x2, x3) = match config.grid {
        GridSpec::Quantile { lower, upper } => {
            let a = reference_sample.column("X2")?.to_vec();
            let b = reference_sample.column("X3")?.to_vec();
            (
                linspace(quantile(&a, lower), quantile(&a, upper), res),
                linspace(quantile(&b, lower), quantile(&b, upper), res),
            )
        }
        GridSpec::Box { lo, hi } => (linspace(lo, hi, res), linspace(lo, hi, res)),
    };
    let mu1 = transform.mean_of(0, &config.scm.covariates);
    let reference = reference_target(&function, mu1, &x1_draws, &x2, &x3)?;

    Ok(CellArtifacts {
        class,
        seed,
        function,
        transform,
        source,
        x3_moments,
        k3_population,
        f_s,
        proposed,
        optimal,
        marginal,
        finetune,
        grid: EvalGrid { x2, x3, reference },
    })
}

/// Epochs giving a budget model roughly the optimal model's gradient steps.
pub fn scaled_epochs(reference: &TrainConfig, reference_rows: usize, budget_rows: usize, batch_size: usize) -> usize {
    let batches = |n: usize| n.div_ceil(batch_size).max(1);
    let steps = reference.epochs * batches(reference_rows);
    steps.div_ceil(batches(budget_rows)).max(1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentDiagnostics {
    pub mu3: f64,
    pub mu3_standard_error: f64,
    pub k3: f64,
    pub k3_standard_error: Option<f64>,
    pub k3_population: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub class: FunctionClass,
    pub seed: u64,
    pub coefficients: Vec<f64>,
    /// Grid MSE per method; `None` for a flagged method.
    pub losses: BTreeMap<String, Option<f64>>,
    /// From-scratch grid MSE per budget.
    pub from_scratch: BTreeMap<usize, f64>,
    pub flags: Vec<String>,
    pub moments: MomentDiagnostics,
    pub runtime_secs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub median: f64,
    pub min: f64,
    pub max: f64,
    pub count: usize,
    pub excluded: usize,
}

impl Spread {
    fn of(values: &[Option<f64>]) -> Option<Self> {
        let kept: Vec<f64> = values.iter().flatten().copied().collect();
        if kept.is_empty() {
            return None;
        }
        Some(Self {
            median: median(&kept),
            min: kept.iter().copied().fold(f64::INFINITY, f64::min),
            max: kept.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            count: kept.len(),
            excluded: values.len() - kept.len(),
        })
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    /// `class → method → spread of grid MSE over seeds`.
    pub grid_mse: BTreeMap<String, BTreeMap<String, Spread>>,
    /// `method → budget → class → spread of percentage loss`.
    pub percentage_loss: BTreeMap<String, BTreeMap<usize, BTreeMap<String, Spread>>>,
    /// `method → budget → unweighted mean of the per-class medians`.
    pub aggregate_percentage_loss: BTreeMap<String, BTreeMap<usize, f64>>,
    pub total_runtime_secs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub cells: Vec<CellResult>,
    pub summary: ReportSummary,
}

impl EvaluationReport {
    pub fn median_loss(&self, class: FunctionClass, method: &str) -> Option<f64> {
        self.summary.grid_mse.get(class.name())?.get(method).map(|s| s.median)
    }

    /// Long-format rows `class, seed, method, budget, loss, pct_loss, flags`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(writer);
        w.write_record(["class", "seed", "method", "budget", "loss", "pct_loss", "flags"])?;
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:e}")).unwrap_or_default();
        for cell in &self.cells {
            let class = cell.class.name();
            let seed = cell.seed.to_string();
            for method in METHODS {
                let loss = cell.losses.get(method).copied().flatten();
                let flags = if loss.is_none() { cell.flags.join(";") } else { String::new() };
                if cell.from_scratch.is_empty() {
                    w.write_record([class, &seed, method, "", &fmt(loss), "", &flags])?;
                }
                for (&budget, &base) in &cell.from_scratch {
                    let pct = loss.and_then(|l| percentage_loss(l, base).ok());
                    w.write_record([class, &seed, method, &budget.to_string(), &fmt(loss), &fmt(pct), &flags])?;
                }
            }
            for (&budget, &base) in &cell.from_scratch {
                w.write_record([class, &seed, FROM_SCRATCH, &budget.to_string(), &fmt(Some(base)), &fmt(Some(0.0)), ""])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

fn summarize(cells: &[CellResult], total_runtime_secs: f64) -> ReportSummary {
    let mut grid_mse = BTreeMap::new();
    let mut percentage = BTreeMap::<String, BTreeMap<usize, BTreeMap<String, Spread>>>::new();
    let classes: Vec<FunctionClass> = FunctionClass::ALL.into_iter().filter(|c| cells.iter().any(|r| r.class == *c)).collect();
    for class in &classes {
        let rows: Vec<&CellResult> = cells.iter().filter(|r| r.class == *class).collect();
        let mut per_method = BTreeMap::new();
        for method in METHODS {
            let values: Vec<Option<f64>> = rows.iter().map(|r| r.losses.get(method).copied().flatten()).collect();
            if let Some(s) = Spread::of(&values) {
                per_method.insert(method.to_string(), s);
            }
        }
        grid_mse.insert(class.name().to_string(), per_method);
        let budgets: Vec<usize> = rows.first().map(|r| r.from_scratch.keys().copied().collect()).unwrap_or_default();
        for method in METHODS {
            for &b in &budgets {
                let values: Vec<Option<f64>> = rows
                    .iter()
                    .map(|r| {
                        let loss = r.losses.get(method).copied().flatten()?;
                        percentage_loss(loss, *r.from_scratch.get(&b)?).ok()
                    })
                    .collect();
                if let Some(s) = Spread::of(&values) {
                    percentage.entry(method.to_string()).or_default().entry(b).or_default().insert(class.name().to_string(), s);
                }
            }
        }
    }
    let aggregate_percentage_loss = percentage
        .iter()
        .map(|(m, by_budget)| {
            let agg = by_budget
                .iter()
                .map(|(&b, by_class)| (b, by_class.values().map(|s| s.median).sum::<f64>() / by_class.len() as f64))
                .collect();
            (m.clone(), agg)
        })
        .collect();
    ReportSummary { grid_mse, percentage_loss: percentage, aggregate_percentage_loss, total_runtime_secs }
}

/// Scores one prepared cell, including the from-scratch budget sweep.
pub fn evaluate_cell(config: &ExperimentConfig, cell: &CellArtifacts) -> Result<CellResult> {
    let mut losses = BTreeMap::new();
    let mut flags = Vec::new();
    for method in METHODS {
        let loss = cell.predictor(method).map(|p| cell.grid.mse(p));
        losses.insert(method.to_string(), loss);
    }
    if cell.proposed.is_err() {
        flags.push(FLAG_SKEW_DEGENERATE.to_string());
    }
    let base = cell_seed(cell.seed, cell.class);
    let mut from_scratch = BTreeMap::new();
    let opt_cfg = &config.training.optimal;
    for &budget in &config.budgets {
        let stream = derive_seed(base, 100 + budget as u64);
        let data = resample_joint(&config.scm.clone().with_seed(stream), &cell.transform, &cell.function, budget)?;
        let mut cfg = role(&config.training.from_scratch, derive_seed(stream, 1));
        cfg.epochs = scaled_epochs(opt_cfg, config.optimal_size, budget, cfg.batch_size);
        let model = optimal_baseline(&data, &cfg)?;
        from_scratch.insert(budget, cell.grid.mse(&model));
    }
    let m = &cell.x3_moments;
    Ok(CellResult {
        class: cell.class,
        seed: cell.seed,
        coefficients: cell.function.coefficients().to_vec(),
        losses,
        from_scratch,
        flags,
        moments: MomentDiagnostics {
            mu3: m.mean,
            mu3_standard_error: m.mean_standard_error(),
            k3: m.skew(),
            k3_standard_error: m.skew_standard_error(),
            k3_population: cell.k3_population,
        },
        runtime_secs: 0.0,
    })
}

/// Runs every (class, seed) cell and, when `out_dir` is set, writes
/// `report.csv`, `summary.json` and optional contour grids.
pub fn run_benchmark(config: &ExperimentConfig) -> Result<EvaluationReport> {
    config.validate()?;
    let start = Instant::now();
    let mut cells = Vec::new();
    for class in config.function_classes()? {
        for (k, &seed) in config.seeds.iter().enumerate() {
            let t0 = Instant::now();
            let artifacts = prepare_cell(config, class, seed)?;
            let mut result = evaluate_cell(config, &artifacts)?;
            result.runtime_secs = t0.elapsed().as_secs_f64();
            if config.write_contours && k == 0 {
                if let Some(dir) = &config.out_dir {
                    write_cell_contours(&artifacts, &dir.join("contours").join(class.name()))?;
                }
            }
            cells.push(result);
        }
    }
    let summary = summarize(&cells, start.elapsed().as_secs_f64());
    let report = EvaluationReport { cells, summary };
    if let Some(dir) = &config.out_dir {
        write_report(&report, dir)?;
    }
    Ok(report)
}

pub fn write_report(report: &EvaluationReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    report.write_csv(fs::File::create(dir.join("report.csv"))?)?;
    fs::write(dir.join("summary.json"), serde_json::to_string_pretty(report)? + "\n")?;
    Ok(())
}

/// Writes a predictor's values on the Cartesian grid. The header row is
/// `x2\x3` followed by the `x3` values; each later row is an `x2` value and
/// its predictions.
pub fn contour_grid<P: TargetPredictor + ?Sized, W: Write>(predictor: &P, x2: &[f64], x3: &[f64], writer: W) -> Result<()> {
    if x2.len() < 2 || x3.len() < 2 {
        return Err(OovError::InvalidConfig("contour resolution must be at least 2 per axis".into()));
    }
    let values = predictor.predict_grid(x2, x3);
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(writer);
    let mut header = vec!["x2\\x3".to_string()];
    header.extend(x3.iter().map(|v| v.to_string()));
    w.write_record(&header)?;
    for (i, &a) in x2.iter().enumerate() {
        let mut row = vec![a.to_string()];
        row.extend(values.row(i).iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_contour_file<P: TargetPredictor + ?Sized>(predictor: &P, x2: &[f64], x3: &[f64], path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    contour_grid(predictor, x2, x3, fs::File::create(path)?)
}

/// One `contour_<method>.csv` per method on the cell's evaluation grid,
/// plus `contour_Reference.csv`.
pub fn write_cell_contours(cell: &CellArtifacts, dir: &Path) -> Result<()> {
    for method in METHODS {
        if let Some(p) = cell.predictor(method) {
            write_contour_file(p, &cell.grid.x2, &cell.grid.x3, &dir.join(format!("contour_{method}.csv")))?;
        }
    }
    let reference = GridValues { x2: &cell.grid.x2, x3: &cell.grid.x3, values: &cell.grid.reference };
    write_contour_file(&reference, &cell.grid.x2, &cell.grid.x3, &dir.join("contour_Reference.csv"))
}

struct GridValues<'a> {
    x2: &'a [f64],
    x3: &'a [f64],
    values: &'a Array2<f64>,
}

impl TargetPredictor for GridValues<'_> {
    fn predict_target(&self, x2: f64, x3: f64) -> f64 {
        let i = self.x2.iter().position(|&v| v == x2).expect("grid x2");
        let j = self.x3.iter().position(|&v| v == x3).expect("grid x3");
        self.values[[i, j]]
    }
}

/// Settings for the composition demo: `Z = 2·PA + ε1`, `Y = sin(PA) + ε`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CompositionConfig {
    /// Values of the mediator noise sd to compare.
    pub mediator_noise_sds: Vec<f64>,
    pub seeds: Vec<u64>,
    pub rows: usize,
    pub scm: MediatedConfig,
    pub training: TrainConfig,
    /// Evaluation points spread evenly over the parent range.
    pub eval_points: usize,
}

impl Default for CompositionConfig {
    fn default() -> Self {
        Self {
            mediator_noise_sds: vec![0.01, 1.0],
            seeds: (0..5).collect(),
            rows: 10_000,
            scm: MediatedConfig::default(),
            training: TrainConfig::default().with_epochs(40).with_learning_rate(3e-3),
            eval_points: 200,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompositionRun {
    pub mediator_noise_sd: f64,
    pub seed: u64,
    pub mse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompositionReport {
    pub runs: Vec<CompositionRun>,
    /// Median MSE against φ per mediator noise sd, in config order.
    pub medians: Vec<(f64, f64)>,
}

pub fn composition_mechanism() -> (fn(f64) -> f64, fn(f64) -> f64) {
    (|pa| 2.0 * pa, f64::sin)
}

/// Trains the composed predictor for every (noise sd, seed) pair and scores
/// it against φ on the parent support.
pub fn demo_composition(config: &CompositionConfig) -> Result<CompositionReport> {
    if config.seeds.is_empty() || config.mediator_noise_sds.is_empty() {
        return Err(OovError::InvalidConfig("composition demo needs seeds and noise levels".into()));
    }
    if config.eval_points < 2 || config.rows == 0 {
        return Err(OovError::InvalidConfig("composition demo needs rows >= 1 and eval_points >= 2".into()));
    }
    let (g, phi) = composition_mechanism();
    let [lo, hi] = config.scm.parent_range;
    let pa = linspace(lo, hi, config.eval_points);
    let pa_grid = Array2::from_shape_vec((pa.len(), 1), pa.clone()).expect("column");
    let truth: Vec<f64> = pa.iter().map(|&v| phi(v)).collect();
    let mut runs = Vec::new();
    let mut medians = Vec::new();
    for &sd in &config.mediator_noise_sds {
        let mut mses = Vec::new();
        for &seed in &config.seeds {
            let scm = MediatedConfig { mediator_noise_sd: sd, seed, ..config.scm.clone() };
            let (s1, s2) = sample_mediated(&scm, config.rows, g, phi)?;
            let composed = compose_possibility(&s1, &s2, "Z", &config.training.clone().with_seed(seed))?;
            let pred = composed.predict(pa_grid.view())?;
            let mse = pred.iter().zip(&truth).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / pred.len() as f64;
            mses.push(mse);
            runs.push(CompositionRun { mediator_noise_sd: sd, seed, mse });
        }
        medians.push((sd, median(&mses)));
    }
    Ok(CompositionReport { runs, medians })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::surface::FnModel;

    #[test]
    fn percentage_loss_examples() {
        assert_eq!(percentage_loss(0.2, 0.1).unwrap(), 1.0);
        assert_eq!(percentage_loss(0.1, 0.1).unwrap(), 0.0);
        assert_eq!(percentage_loss(0.05, 0.1).unwrap(), -0.5);
        assert!(matches!(percentage_loss(0.1, 0.0), Err(OovError::ZeroDenominator(_))));
    }

    #[test]
    fn constant_contour() {
        let mut buf = Vec::new();
        contour_grid(&FnModel(|_: f64, _: f64| 1.5), &[0.0, 1.0, 2.0], &[0.0, 1.0, 2.0], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 4);
        let values: Vec<&str> = lines[1..].iter().flat_map(|l| l.split(',').skip(1)).collect();
        assert_eq!(values.len(), 9);
        assert!(values.iter().all(|v| *v == "1.5"));
        assert!(!text.contains('\r'));
        assert!(contour_grid(&FnModel(|_: f64, _: f64| 0.0), &[0.0], &[0.0, 1.0], Vec::new()).is_err());
    }

    #[test]
    fn config_round_trip_and_validation() {
        let cfg = ExperimentConfig::default();
        let back: ExperimentConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(cfg.function_classes().unwrap().len(), 3);
        let partial: ExperimentConfig = serde_json::from_str(r#"{"classes": ["polynomial"], "seeds": [3]}"#).unwrap();
        assert_eq!(partial.function_classes().unwrap(), vec![FunctionClass::Polynomial]);
        assert_eq!(partial.source_size, 100_000);
        let mut bad = ExperimentConfig::default();
        bad.seeds.clear();
        assert!(bad.validate().is_err());
        let mut bad = ExperimentConfig::default();
        bad.classes = vec!["quartic".into()];
        assert!(bad.validate().is_err());
        let mut bad = ExperimentConfig::default();
        bad.grid_resolution = 1;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn scaled_epochs_match_steps() {
        let cfg = TrainConfig::default().with_epochs(40);
        assert_eq!(scaled_epochs(&cfg, 100_000, 100_000, 256), 40);
        assert_eq!(scaled_epochs(&cfg, 100_000, 10, 256), 40 * 391);
        assert_eq!(scaled_epochs(&cfg, 1000, 512, 256), 80);
    }

    #[test]
    fn quantiles_and_medians() {
        assert_eq!(quantile(&[3.0, 1.0, 2.0], 0.5), 2.0);
        assert_eq!(quantile(&[0.0, 10.0], 0.25), 2.5);
        assert_eq!(median(&[4.0, 1.0, 3.0, 2.0]), 2.5);
    }

    fn tiny_config() -> ExperimentConfig {
        let small = TrainConfig::default().with_epochs(2).with_hidden(vec![8, 8]).with_learning_rate(3e-3);
        ExperimentConfig {
            classes: vec!["polynomial".into()],
            seeds: vec![0],
            source_size: 2000,
            target_covariate_size: 50,
            pool_size: 100,
            optimal_size: 2000,
            budgets: vec![10, 100],
            reference_draws: 1000,
            grid_resolution: 5,
            training: RoleConfigs { source: small.clone(), derivative: small.clone(), optimal: small.clone(), from_scratch: small },
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn tiny_benchmark_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config();
        cfg.out_dir = Some(dir.path().join("a"));
        cfg.write_contours = true;
        let a = run_benchmark(&cfg).unwrap();
        cfg.out_dir = Some(dir.path().join("b"));
        run_benchmark(&cfg).unwrap();
        let csv_a = fs::read(dir.path().join("a/report.csv")).unwrap();
        assert_eq!(csv_a, fs::read(dir.path().join("b/report.csv")).unwrap());
        let text = String::from_utf8(csv_a).unwrap();
        assert!(text.starts_with("class,seed,method,budget,loss,pct_loss,flags\n"));
        // 4 methods × 2 budgets + 2 from-scratch rows
        assert_eq!(text.lines().count(), 1 + 10);
        assert_eq!(a.cells.len(), 1);
        let marginal = fs::read_to_string(dir.path().join("a/contours/polynomial/contour_Marginal.csv")).unwrap();
        for line in marginal.lines().skip(1) {
            let vals: Vec<&str> = line.split(',').skip(1).collect();
            assert!(vals.iter().all(|v| *v == vals[0]));
        }
    }

    #[test]
    fn degenerate_skew_is_flagged() {
        let mut cfg = tiny_config();
        cfg.budgets.clear();
        cfg.skew_threshold = 1e9;
        let report = run_benchmark(&cfg).unwrap();
        let cell = &report.cells[0];
        assert_eq!(cell.flags, vec![FLAG_SKEW_DEGENERATE.to_string()]);
        assert_eq!(cell.losses["Proposed"], None);
        assert!(cell.losses["Marginal"].is_some());
        let mut buf = Vec::new();
        report.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.contains("polynomial,0,Proposed,,,,skew_degenerate"));
        assert_eq!(report.summary.grid_mse["polynomial"].get("Proposed"), None);
    }
}
