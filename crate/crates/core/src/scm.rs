//! Additive-noise structural causal models over three independent covariates.
//!
//! `Y := φ(X1, X2, X3) + ε` with `Xi` i.i.d. from a covariate distribution,
//! min-max standardized into `[lo, hi]`, and `ε ~ N(0, σ²)`. Environments are
//! column projections of the joint sample.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView1, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{OovError, Result};

pub const COVARIATE_NAMES: [&str; 3] = ["X1", "X2", "X3"];
pub const TARGET_NAME: &str = "Y";

/// SplitMix64 step, used to derive independent stream seeds from one base seed.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FunctionClass {
    Polynomial,
    NonlinearNorm,
    Trigonometric,
}

impl FunctionClass {
    pub const ALL: [FunctionClass; 3] = [
        FunctionClass::Polynomial,
        FunctionClass::NonlinearNorm,
        FunctionClass::Trigonometric,
    ];

    pub fn coefficient_count(self) -> usize {
        match self {
            FunctionClass::Polynomial => 7,
            FunctionClass::NonlinearNorm => 3,
            FunctionClass::Trigonometric => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FunctionClass::Polynomial => "polynomial",
            FunctionClass::NonlinearNorm => "nonlinear",
            FunctionClass::Trigonometric => "trigonometric",
        }
    }
}

impl std::fmt::Display for FunctionClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for FunctionClass {
    type Err = OovError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "polynomial" | "poly" => Ok(FunctionClass::Polynomial),
            "nonlinear" | "nonlinear_norm" => Ok(FunctionClass::NonlinearNorm),
            "trigonometric" | "trig" => Ok(FunctionClass::Trigonometric),
            other => Err(OovError::InvalidConfig(format!("unknown function class `{other}`"))),
        }
    }
}

/// The generating mechanism φ.
///
/// * `Polynomial`: `α·[x1, x2, x3, x1x2, x1x3, x2x3, x1x2x3]`
/// * `NonlinearNorm`: `sqrt((α1x1)² + (α2x2)² + (α3x3)²)`
/// * `Trigonometric`: `α1 cos x1 + α2 sin x2 + α3 cos x3 + α4 cos(x1x3)`
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawFunction", into = "RawFunction")]
pub struct GeneratingFunction {
    class: FunctionClass,
    coefficients: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawFunction {
    variant: FunctionClass,
    coefficients: Vec<f64>,
}

impl TryFrom<RawFunction> for GeneratingFunction {
    type Error = OovError;

    fn try_from(raw: RawFunction) -> Result<Self> {
        GeneratingFunction::new(raw.variant, raw.coefficients)
    }
}

impl From<GeneratingFunction> for RawFunction {
    fn from(f: GeneratingFunction) -> Self {
        RawFunction { variant: f.class, coefficients: f.coefficients }
    }
}

impl GeneratingFunction {
    pub fn new(class: FunctionClass, coefficients: Vec<f64>) -> Result<Self> {
        if coefficients.len() != class.coefficient_count() {
            return Err(OovError::InvalidConfig(format!(
                "{class} function needs {} coefficients, got {}",
                class.coefficient_count(),
                coefficients.len()
            )));
        }
        if coefficients.iter().any(|c| !c.is_finite()) {
            return Err(OovError::NonFinite("generating function coefficients".into()));
        }
        Ok(Self { class, coefficients })
    }

    pub fn polynomial(alpha: [f64; 7]) -> Self {
        Self::new(FunctionClass::Polynomial, alpha.to_vec()).expect("finite coefficients")
    }

    pub fn nonlinear_norm(alpha: [f64; 3]) -> Self {
        Self::new(FunctionClass::NonlinearNorm, alpha.to_vec()).expect("finite coefficients")
    }

    pub fn trigonometric(alpha: [f64; 4]) -> Self {
        Self::new(FunctionClass::Trigonometric, alpha.to_vec()).expect("finite coefficients")
    }

    /// Coefficients drawn i.i.d. from N(0, 1).
    pub fn random<R: Rng + ?Sized>(class: FunctionClass, rng: &mut R) -> Self {
        let coefficients = (0..class.coefficient_count())
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self { class, coefficients }
    }

    pub fn class(&self) -> FunctionClass {
        self.class
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coefficients
    }

    pub fn eval(&self, x1: f64, x2: f64, x3: f64) -> f64 {
        let a = &self.coefficients;
        match self.class {
            FunctionClass::Polynomial => {
                a[0] * x1
                    + a[1] * x2
                    + a[2] * x3
                    + a[3] * x1 * x2
                    + a[4] * x1 * x3
                    + a[5] * x2 * x3
                    + a[6] * x1 * x2 * x3
            }
            FunctionClass::NonlinearNorm => {
                ((a[0] * x1).powi(2) + (a[1] * x2).powi(2) + (a[2] * x3).powi(2)).sqrt()
            }
            FunctionClass::Trigonometric => {
                a[0] * x1.cos() + a[1] * x2.sin() + a[2] * x3.cos() + a[3] * (x1 * x3).cos()
            }
        }
    }

    /// Exact ∂φ/∂x3.
    pub fn d_dx3(&self, x1: f64, x2: f64, x3: f64) -> f64 {
        let a = &self.coefficients;
        match self.class {
            FunctionClass::Polynomial => a[2] + a[4] * x1 + a[5] * x2 + a[6] * x1 * x2,
            FunctionClass::NonlinearNorm => {
                let norm = self.eval(x1, x2, x3);
                if norm == 0.0 {
                    0.0
                } else {
                    a[2] * a[2] * x3 / norm
                }
            }
            FunctionClass::Trigonometric => -a[2] * x3.sin() - a[3] * x1 * (x1 * x3).sin(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum CovariateDistribution {
    Gamma { shape: f64, scale: f64 },
}

impl Default for CovariateDistribution {
    fn default() -> Self {
        CovariateDistribution::Gamma { shape: 1.0, scale: 1.0 }
    }
}

impl CovariateDistribution {
    fn validate(&self) -> Result<()> {
        match *self {
            CovariateDistribution::Gamma { shape, scale } => {
                if !(shape > 0.0 && scale > 0.0 && shape.is_finite() && scale.is_finite()) {
                    return Err(OovError::InvalidConfig(format!(
                        "gamma shape and scale must be positive, got ({shape}, {scale})"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn mean(&self) -> f64 {
        match *self {
            CovariateDistribution::Gamma { shape, scale } => shape * scale,
        }
    }

    /// Population central moment `E[(X − μ)^k]` for `k ≤ 6`.
    pub fn central_moment(&self, k: usize) -> Result<f64> {
        match *self {
            CovariateDistribution::Gamma { shape: s, scale: t } => {
                let m = match k {
                    0 => 1.0,
                    1 => 0.0,
                    2 => s,
                    3 => 2.0 * s,
                    4 => 3.0 * s * (s + 2.0),
                    5 => 4.0 * s * (5.0 * s + 6.0),
                    6 => 5.0 * s * (3.0 * s * s + 26.0 * s + 24.0),
                    other => return Err(OovError::UnsupportedOrder(other)),
                };
                Ok(m * t.powi(k as i32))
            }
        }
    }

    fn sampler(&self) -> Result<Gamma<f64>> {
        match *self {
            CovariateDistribution::Gamma { shape, scale } => Gamma::new(shape, scale)
                .map_err(|e| OovError::InvalidConfig(format!("gamma parameters: {e}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScmConfig {
    pub covariates: CovariateDistribution,
    pub noise_sd: f64,
    pub bounds: [f64; 2],
    pub seed: u64,
}

impl Default for ScmConfig {
    fn default() -> Self {
        Self {
            covariates: CovariateDistribution::default(),
            noise_sd: 0.1,
            bounds: [0.0, 5.0],
            seed: 0,
        }
    }
}

impl ScmConfig {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_noise(mut self, noise_sd: f64) -> Self {
        self.noise_sd = noise_sd;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.covariates.validate()?;
        if !(self.noise_sd >= 0.0 && self.noise_sd.is_finite()) {
            return Err(OovError::InvalidConfig(format!(
                "noise sd must be non-negative, got {}",
                self.noise_sd
            )));
        }
        let [lo, hi] = self.bounds;
        if !(lo < hi && lo.is_finite() && hi.is_finite()) {
            return Err(OovError::InvalidConfig(format!("bounds need lo < hi, got [{lo}, {hi}]")));
        }
        Ok(())
    }
}

/// Per-variable affine map `x̃ = offset + scale·x`, fit by min-max on a sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StandardizationTransform {
    pub offsets: Vec<f64>,
    pub scales: Vec<f64>,
}

impl StandardizationTransform {
    /// Fits one map per column of `raw` so the column spans exactly `[lo, hi]`.
    /// A constant column maps to `lo` with unit scale.
    pub fn fit(raw: &Array2<f64>, lo: f64, hi: f64) -> Self {
        let mut offsets = Vec::with_capacity(raw.ncols());
        let mut scales = Vec::with_capacity(raw.ncols());
        for col in raw.axis_iter(Axis(1)) {
            let min = col.iter().copied().fold(f64::INFINITY, f64::min);
            let max = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let scale = if max > min { (hi - lo) / (max - min) } else { 1.0 };
            offsets.push(lo - scale * min);
            scales.push(scale);
        }
        Self { offsets, scales }
    }

    pub fn apply(&self, var: usize, x: f64) -> f64 {
        self.offsets[var] + self.scales[var] * x
    }

    pub fn invert(&self, var: usize, x: f64) -> f64 {
        (x - self.offsets[var]) / self.scales[var]
    }

    pub fn apply_all(&self, raw: &Array2<f64>) -> Array2<f64> {
        let mut out = raw.clone();
        for (j, mut col) in out.axis_iter_mut(Axis(1)).enumerate() {
            col.mapv_inplace(|x| self.apply(j, x));
        }
        out
    }

    pub fn invert_all(&self, standardized: &Array2<f64>) -> Array2<f64> {
        let mut out = standardized.clone();
        for (j, mut col) in out.axis_iter_mut(Axis(1)).enumerate() {
            col.mapv_inplace(|x| self.invert(j, x));
        }
        out
    }

    /// Population mean of the standardized variable.
    pub fn mean_of(&self, var: usize, dist: &CovariateDistribution) -> f64 {
        self.apply(var, dist.mean())
    }

    /// Population central moment of order `k` of the standardized variable.
    pub fn central_moment_of(&self, var: usize, dist: &CovariateDistribution, k: usize) -> Result<f64> {
        Ok(dist.central_moment(k)? * self.scales[var].powi(k as i32))
    }
}

/// One environment: named covariate columns plus an optional target.
#[derive(Clone, Debug, PartialEq)]
pub struct EnvironmentDataset {
    names: Vec<String>,
    covariates: Array2<f64>,
    target: Option<Vec<f64>>,
}

impl EnvironmentDataset {
    pub fn new(names: Vec<String>, covariates: Array2<f64>, target: Option<Vec<f64>>) -> Result<Self> {
        if names.len() != covariates.ncols() {
            return Err(OovError::LengthMismatch { left: names.len(), right: covariates.ncols() });
        }
        if let Some(y) = &target {
            if y.len() != covariates.nrows() {
                return Err(OovError::LengthMismatch { left: y.len(), right: covariates.nrows() });
            }
            if y.iter().any(|v| !v.is_finite()) {
                return Err(OovError::NonFinite("target column".into()));
            }
        }
        if covariates.iter().any(|v| !v.is_finite()) {
            return Err(OovError::NonFinite("covariate matrix".into()));
        }
        Ok(Self { names, covariates, target })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn covariates(&self) -> &Array2<f64> {
        &self.covariates
    }

    pub fn target(&self) -> Option<&[f64]> {
        self.target.as_deref()
    }

    pub fn n_rows(&self) -> usize {
        self.covariates.nrows()
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| OovError::UnknownVariable(name.to_string()))
    }

    pub fn column(&self, name: &str) -> Result<ArrayView1<'_, f64>> {
        Ok(self.covariates.column(self.index_of(name)?))
    }

    /// Covariate submatrix with columns in the requested order.
    pub fn select(&self, keep: &[&str]) -> Result<Array2<f64>> {
        let idx = keep.iter().map(|n| self.index_of(n)).collect::<Result<Vec<_>>>()?;
        Ok(self.covariates.select(Axis(1), &idx))
    }

    pub fn project(&self, keep: &[&str], include_target: bool) -> Result<EnvironmentDataset> {
        let covariates = self.select(keep)?;
        let target = if include_target { self.target.clone() } else { None };
        Ok(EnvironmentDataset {
            names: keep.iter().map(|s| s.to_string()).collect(),
            covariates,
            target,
        })
    }

    pub fn require_target(&self) -> Result<&[f64]> {
        self.target().ok_or_else(|| OovError::UnknownVariable(TARGET_NAME.to_string()))
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(writer);
        let mut header: Vec<&str> = self.names.iter().map(String::as_str).collect();
        if self.target.is_some() {
            header.push(TARGET_NAME);
        }
        w.write_record(&header)?;
        for (i, row) in self.covariates.rows().into_iter().enumerate() {
            let mut rec: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            if let Some(y) = &self.target {
                rec.push(y[i].to_string());
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a CSV with a header row; a trailing `Y` column becomes the target.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let header: Vec<String> = r.headers()?.iter().map(|s| s.trim().to_string()).collect();
        let has_target = header.last().map(|s| s == TARGET_NAME).unwrap_or(false);
        let n_cov = if has_target { header.len() - 1 } else { header.len() };
        let mut values = Vec::new();
        let mut target = Vec::new();
        let mut rows = 0;
        for rec in r.records() {
            let rec = rec?;
            if rec.len() != header.len() {
                return Err(OovError::LengthMismatch { left: rec.len(), right: header.len() });
            }
            for (j, field) in rec.iter().enumerate() {
                let v: f64 = field
                    .trim()
                    .parse()
                    .map_err(|_| OovError::InvalidConfig(format!("not a number: `{field}`")))?;
                if j < n_cov {
                    values.push(v);
                } else {
                    target.push(v);
                }
            }
            rows += 1;
        }
        let covariates = Array2::from_shape_vec((rows, n_cov), values)
            .map_err(|e| OovError::ShapeMismatch(e.to_string()))?;
        Self::new(header[..n_cov].to_vec(), covariates, has_target.then_some(target))
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        self.write_csv(std::io::BufWriter::new(std::fs::File::create(path)?))
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        Self::read_csv(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

/// Bivariate predictor `c0 + c1·a + c2·b + c3·a·b`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolyPredictor {
    pub c0: f64,
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
}

impl PolyPredictor {
    pub fn new(c0: f64, c1: f64, c2: f64, c3: f64) -> Self {
        Self { c0, c1, c2, c3 }
    }

    pub fn eval(&self, a: f64, b: f64) -> f64 {
        self.c0 + self.c1 * a + self.c2 * b + self.c3 * a * b
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.c0, self.c1, self.c2, self.c3]
    }
}

fn draw_raw_covariates(config: &ScmConfig, n: usize, rng: &mut ChaCha8Rng) -> Result<Array2<f64>> {
    let gamma = config.covariates.sampler()?;
    let raw = Array2::from_shape_fn((n, 3), |_| gamma.sample(rng));
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(OovError::NonFinite("covariate sample".into()));
    }
    Ok(raw)
}

fn attach_target<F>(config: &ScmConfig, covariates: Array2<f64>, phi: F, rng: &mut ChaCha8Rng) -> Result<EnvironmentDataset>
where
    F: Fn(f64, f64, f64) -> f64,
{
    let y: Vec<f64> = covariates
        .rows()
        .into_iter()
        .map(|r| {
            let eps: f64 = rng.sample(StandardNormal);
            phi(r[0], r[1], r[2]) + config.noise_sd * eps
        })
        .collect();
    if y.iter().any(|v| !v.is_finite()) {
        return Err(OovError::NonFinite("target sample".into()));
    }
    EnvironmentDataset::new(
        COVARIATE_NAMES.iter().map(|s| s.to_string()).collect(),
        covariates,
        Some(y),
    )
}

/// Joint sample `(X1, X2, X3, Y)` from an arbitrary mechanism, standardized by a
/// transform fit on this sample.
pub fn sample_joint_with<F>(config: &ScmConfig, n: usize, phi: F) -> Result<(EnvironmentDataset, StandardizationTransform)>
where
    F: Fn(f64, f64, f64) -> f64,
{
    config.validate()?;
    if n == 0 {
        return Err(OovError::InsufficientSamples { needed: 1, got: 0 });
    }
    let mut rng = seeded_rng(config.seed);
    let raw = draw_raw_covariates(config, n, &mut rng)?;
    let transform = StandardizationTransform::fit(&raw, config.bounds[0], config.bounds[1]);
    let data = attach_target(config, transform.apply_all(&raw), phi, &mut rng)?;
    Ok((data, transform))
}

pub fn sample_joint(
    config: &ScmConfig,
    func: &GeneratingFunction,
    n: usize,
) -> Result<(EnvironmentDataset, StandardizationTransform)> {
    sample_joint_with(config, n, |a, b, c| func.eval(a, b, c))
}

/// Fresh joint draws from the same SCM, mapped through an existing transform.
/// Used for environments that must share variable semantics with the fitting sample.
pub fn resample_joint_with<F>(
    config: &ScmConfig,
    transform: &StandardizationTransform,
    n: usize,
    phi: F,
) -> Result<EnvironmentDataset>
where
    F: Fn(f64, f64, f64) -> f64,
{
    config.validate()?;
    if n == 0 {
        return Err(OovError::InsufficientSamples { needed: 1, got: 0 });
    }
    let mut rng = seeded_rng(config.seed);
    let raw = draw_raw_covariates(config, n, &mut rng)?;
    attach_target(config, transform.apply_all(&raw), phi, &mut rng)
}

pub fn resample_joint(
    config: &ScmConfig,
    transform: &StandardizationTransform,
    func: &GeneratingFunction,
    n: usize,
) -> Result<EnvironmentDataset> {
    resample_joint_with(config, transform, n, |a, b, c| func.eval(a, b, c))
}

/// Mediated mechanism `PA → Z → …` with `Z = g(PA) + ε1`, `Y = φ(PA) + ε`,
/// and `PA ~ U[lo, hi]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MediatedConfig {
    pub parent_range: [f64; 2],
    /// sd of `ε1` in the parent-to-child relation.
    pub mediator_noise_sd: f64,
    pub noise_sd: f64,
    pub seed: u64,
}

impl Default for MediatedConfig {
    fn default() -> Self {
        Self { parent_range: [0.0, 3.0], mediator_noise_sd: 0.01, noise_sd: 0.1, seed: 0 }
    }
}

impl MediatedConfig {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.parent_range;
        if !(lo < hi && lo.is_finite() && hi.is_finite()) {
            return Err(OovError::InvalidConfig(format!("parent range needs lo < hi, got [{lo}, {hi}]")));
        }
        for (name, v) in [("mediator_noise_sd", self.mediator_noise_sd), ("noise_sd", self.noise_sd)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(OovError::InvalidConfig(format!("{name} must be non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

/// Two independent environments from a mediated mechanism: `(Z, Y)` and
/// `(PA, Z)`, each with `n` rows. The second carries no target.
pub fn sample_mediated<G, F>(config: &MediatedConfig, n: usize, g: G, phi: F) -> Result<(EnvironmentDataset, EnvironmentDataset)>
where
    G: Fn(f64) -> f64,
    F: Fn(f64) -> f64,
{
    config.validate()?;
    if n == 0 {
        return Err(OovError::InsufficientSamples { needed: 1, got: 0 });
    }
    let [lo, hi] = config.parent_range;
    let draw = |stream: u64| {
        let mut rng = seeded_rng(derive_seed(config.seed, stream));
        let mut rows = Vec::with_capacity(n);
        for _ in 0..n {
            let pa = rng.random_range(lo..hi);
            let z = g(pa) + config.mediator_noise_sd * rng.sample::<f64, _>(StandardNormal);
            let y = phi(pa) + config.noise_sd * rng.sample::<f64, _>(StandardNormal);
            rows.push((pa, z, y));
        }
        rows
    };
    let first = draw(1);
    let second = draw(2);
    let s1 = EnvironmentDataset::new(
        vec!["Z".into()],
        Array2::from_shape_fn((n, 1), |(i, _)| first[i].1),
        Some(first.iter().map(|r| r.2).collect()),
    )?;
    let s2 = EnvironmentDataset::new(
        vec!["PA".into(), "Z".into()],
        Array2::from_shape_fn((n, 2), |(i, j)| if j == 0 { second[i].0 } else { second[i].1 }),
        None,
    )?;
    Ok((s1, s2))
}

pub fn project_environment(data: &EnvironmentDataset, keep: &[&str], include_target: bool) -> Result<EnvironmentDataset> {
    data.project(keep, include_target)
}

pub fn eval_function(func: &GeneratingFunction, x1: f64, x2: f64, x3: f64) -> f64 {
    func.eval(x1, x2, x3)
}

fn poly_coefficients(func: &GeneratingFunction) -> Result<&[f64]> {
    match func.class() {
        FunctionClass::Polynomial => Ok(func.coefficients()),
        FunctionClass::NonlinearNorm => Err(OovError::WrongVariant { expected: "polynomial", found: "nonlinear" }),
        FunctionClass::Trigonometric => Err(OovError::WrongVariant { expected: "polynomial", found: "trigonometric" }),
    }
}

/// Optimal source predictor `E[Y | x1, x2]` over slots `(1, x1, x2, x1x2)`.
pub fn analytic_source_predictor(func: &GeneratingFunction, mu3: f64) -> Result<PolyPredictor> {
    let a = poly_coefficients(func)?;
    Ok(PolyPredictor::new(
        a[2] * mu3,
        a[0] + a[4] * mu3,
        a[1] + a[5] * mu3,
        a[3] + a[6] * mu3,
    ))
}

/// Optimal target predictor `E[Y | x2, x3]` over slots `(1, x2, x3, x2x3)`.
pub fn analytic_target_predictor(func: &GeneratingFunction, mu1: f64) -> Result<PolyPredictor> {
    let a = poly_coefficients(func)?;
    Ok(PolyPredictor::new(
        a[0] * mu1,
        a[1] + a[3] * mu1,
        a[2] + a[4] * mu1,
        a[5] + a[6] * mu1,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    const ONES: [f64; 7] = [1.0; 7];

    #[test]
    fn zero_noise_polynomial_is_exact() {
        let cfg = ScmConfig::default().with_noise(0.0).with_seed(7);
        let f = GeneratingFunction::polynomial([1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        let (data, _) = sample_joint(&cfg, &f, 4).unwrap();
        let y = data.target().unwrap();
        for (i, row) in data.covariates().rows().into_iter().enumerate() {
            assert_eq!(y[i], row[0] + row[1] + row[2]);
        }
    }

    #[test]
    fn source_size_matches_request() {
        let cfg = ScmConfig::default().with_seed(1);
        let (data, _) = sample_joint(&cfg, &GeneratingFunction::polynomial(ONES), 100_000).unwrap();
        assert_eq!(data.n_rows(), 100_000);
        assert_eq!(data.names(), &["X1", "X2", "X3"]);
    }

    #[test]
    fn standardized_third_moment_matches_scaled_gamma() {
        let cfg = ScmConfig::default().with_seed(11);
        let (data, t) = sample_joint(&cfg, &GeneratingFunction::polynomial(ONES), 1_000_000).unwrap();
        for (j, name) in COVARIATE_NAMES.iter().enumerate() {
            let col = data.column(name).unwrap();
            let n = col.len() as f64;
            let mean = col.sum() / n;
            let m3 = col.iter().map(|x| (x - mean).powi(3)).sum::<f64>() / n;
            let expected = 2.0 * t.scales[j].powi(3);
            assert!(((m3 - expected) / expected).abs() < 0.02, "{name}: {m3} vs {expected}");
        }
    }

    #[test]
    fn projections() {
        let cfg = ScmConfig::default().with_seed(3);
        let (joint, _) = sample_joint(&cfg, &GeneratingFunction::polynomial(ONES), 20).unwrap();
        let source = project_environment(&joint, &["X1", "X2"], true).unwrap();
        assert_eq!(source.names(), &["X1", "X2"]);
        assert_eq!(source.target().unwrap().len(), 20);
        let target = project_environment(&joint, &["X2", "X3"], false).unwrap();
        assert!(target.target().is_none());
        assert_eq!(target.covariates().column(0), joint.column("X2").unwrap());
        assert!(matches!(
            project_environment(&joint, &["X9"], true),
            Err(OovError::UnknownVariable(n)) if n == "X9"
        ));
    }

    #[test]
    fn function_values() {
        assert_eq!(GeneratingFunction::polynomial(ONES).eval(1.0, 1.0, 1.0), 7.0);
        assert_eq!(GeneratingFunction::nonlinear_norm([3.0, 4.0, 0.0]).eval(1.0, 1.0, 1.0), 5.0);
        let trig = GeneratingFunction::trigonometric([1.0, 0.0, 0.0, 0.0]);
        assert_eq!(trig.eval(0.0, 0.3, 2.0), 1.0);
    }

    #[test]
    fn coefficient_length_is_checked() {
        assert!(GeneratingFunction::new(FunctionClass::Polynomial, vec![1.0; 3]).is_err());
        assert!(GeneratingFunction::new(FunctionClass::NonlinearNorm, vec![1.0, f64::NAN, 0.0]).is_err());
        let json = r#"{"variant":"trigonometric","coefficients":[1,2]}"#;
        assert!(serde_json::from_str::<GeneratingFunction>(json).is_err());
    }

    #[test]
    fn derivative_matches_central_difference() {
        let mut rng = seeded_rng(5);
        for class in FunctionClass::ALL {
            let f = GeneratingFunction::random(class, &mut rng);
            for &(a, b, c) in &[(0.3, 0.7, 1.1), (2.0, 0.1, 0.4), (1.5, 3.0, 2.5)] {
                let h = 1e-6;
                let fd = (f.eval(a, b, c + h) - f.eval(a, b, c - h)) / (2.0 * h);
                assert!((fd - f.d_dx3(a, b, c)).abs() < 1e-6, "{class}");
            }
        }
    }

    #[test]
    fn analytic_predictors() {
        let f = GeneratingFunction::polynomial(ONES);
        assert_eq!(analytic_source_predictor(&f, 1.0).unwrap().as_array(), [1.0, 2.0, 2.0, 2.0]);
        assert_eq!(analytic_target_predictor(&f, 1.0).unwrap().as_array(), [1.0, 2.0, 2.0, 2.0]);
        let g = GeneratingFunction::polynomial([0.5, -1.5, 2.0, 0.7, 0.0, 0.0, 0.0]);
        assert_eq!(analytic_source_predictor(&g, 0.0).unwrap().as_array(), [0.0, 0.5, -1.5, 0.7]);
        let nl = GeneratingFunction::nonlinear_norm([1.0, 1.0, 1.0]);
        assert!(matches!(analytic_source_predictor(&nl, 1.0), Err(OovError::WrongVariant { .. })));
        assert!(matches!(analytic_target_predictor(&nl, 1.0), Err(OovError::WrongVariant { .. })));
    }

    #[test]
    fn symbolic_marginal_consistency_of_analytic_pair() {
        // E_X1[f_S(X1, x2)] and E_X3[f_T(x2, X3)] are both affine in x2; compare coefficients.
        let mut rng = seeded_rng(9);
        for _ in 0..20 {
            let f = GeneratingFunction::random(FunctionClass::Polynomial, &mut rng);
            let (mu1, mu3) = (rng.random_range(0.1..2.0), rng.random_range(0.1..2.0));
            let s = analytic_source_predictor(&f, mu3).unwrap();
            let t = analytic_target_predictor(&f, mu1).unwrap();
            let lhs = [s.c0 + s.c1 * mu1, s.c2 + s.c3 * mu1];
            let rhs = [t.c0 + t.c2 * mu3, t.c1 + t.c3 * mu3];
            assert!((lhs[0] - rhs[0]).abs() < 1e-12 && (lhs[1] - rhs[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn empirical_marginal_consistency_of_analytic_pair() {
        let cfg = ScmConfig::default().with_seed(21);
        let f = GeneratingFunction::polynomial([0.4, -1.0, 1.3, 0.8, -0.6, 0.5, 0.9]);
        let (joint, t) = sample_joint(&cfg, &f, 400_000).unwrap();
        let dist = cfg.covariates;
        let s = analytic_source_predictor(&f, t.mean_of(2, &dist)).unwrap();
        let tp = analytic_target_predictor(&f, t.mean_of(0, &dist)).unwrap();
        let x1 = joint.column("X1").unwrap();
        let x3 = joint.column("X3").unwrap();
        for &x2 in &[0.1, 0.5, 1.0, 2.0] {
            let a: Vec<f64> = x1.iter().map(|&v| s.eval(v, x2)).collect();
            let b: Vec<f64> = x3.iter().map(|&v| tp.eval(x2, v)).collect();
            let (ma, sa) = mean_and_se(&a);
            let (mb, sb) = mean_and_se(&b);
            assert!((ma - mb).abs() < 3.0 * (sa * sa + sb * sb).sqrt(), "x2={x2}: {ma} vs {mb}");
        }
    }

    fn mean_and_se(v: &[f64]) -> (f64, f64) {
        let n = v.len() as f64;
        let m = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
        (m, (var / n).sqrt())
    }

    #[test]
    fn sampling_is_deterministic() {
        let cfg = ScmConfig::default().with_seed(42);
        let f = GeneratingFunction::trigonometric([1.0, -0.5, 0.3, 2.0]);
        let (a, ta) = sample_joint(&cfg, &f, 500).unwrap();
        let (b, tb) = sample_joint(&cfg, &f, 500).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
        let (c, _) = sample_joint(&cfg.clone().with_seed(43), &f, 500).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn transform_bounds_and_round_trip() {
        let cfg = ScmConfig::default().with_seed(8);
        let mut rng = seeded_rng(8);
        let raw = draw_raw_covariates(&cfg, 1000, &mut rng).unwrap();
        let t = StandardizationTransform::fit(&raw, 0.0, 5.0);
        let z = t.apply_all(&raw);
        assert!(t.scales.iter().all(|&s| s > 0.0));
        assert!(z.iter().all(|&v| (-1e-12..=5.0 + 1e-12).contains(&v)));
        let back = t.invert_all(&z);
        for (a, b) in raw.iter().zip(back.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let f = GeneratingFunction::polynomial(ONES);
        let bad_noise = ScmConfig { noise_sd: -1.0, ..ScmConfig::default() };
        assert!(sample_joint(&bad_noise, &f, 10).is_err());
        let bad_bounds = ScmConfig { bounds: [5.0, 0.0], ..ScmConfig::default() };
        assert!(sample_joint(&bad_bounds, &f, 10).is_err());
        let bad_gamma = ScmConfig {
            covariates: CovariateDistribution::Gamma { shape: 0.0, scale: 1.0 },
            ..ScmConfig::default()
        };
        assert!(sample_joint(&bad_gamma, &f, 10).is_err());
        assert!(sample_joint(&ScmConfig::default(), &f, 0).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let cfg = ScmConfig::default().with_seed(2);
        let (joint, _) = sample_joint(&cfg, &GeneratingFunction::polynomial(ONES), 25).unwrap();
        let mut buf = Vec::new();
        joint.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("X1,X2,X3,Y\n"));
        assert!(!text.contains('\r'));
        let back = EnvironmentDataset::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back, joint);
        let cov_only = joint.project(&["X2", "X3"], false).unwrap();
        let mut buf = Vec::new();
        cov_only.write_csv(&mut buf).unwrap();
        assert_eq!(EnvironmentDataset::read_csv(buf.as_slice()).unwrap(), cov_only);
    }

    #[test]
    fn config_json_has_explicit_tags() {
        let json = serde_json::to_string(&ScmConfig::default()).unwrap();
        assert!(json.contains(r#""family":"gamma""#), "{json}");
        let f = GeneratingFunction::nonlinear_norm([1.0, 2.0, 3.0]);
        let json = serde_json::to_string(&f).unwrap();
        assert_eq!(json, r#"{"variant":"nonlinear_norm","coefficients":[1.0,2.0,3.0]}"#);
        assert_eq!(serde_json::from_str::<GeneratingFunction>(&json).unwrap(), f);
    }
}
