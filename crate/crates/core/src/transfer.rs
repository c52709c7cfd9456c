//! Zero-shot transfer from the moments of the source residual distribution.
//!
//! With `Y = φ(X1, X2, X3) + ε` and only `(X1, X2, Y)` observed, the third
//! conditional moment of `Y − f_S(x1, x2)` is `(∂φ/∂x3)³ · k3` to first order,
//! where `k3` is the third central moment of `X3`. Fitting a surrogate `hθ` to
//! that moment gives the slope of φ in the unobserved variable, and the target
//! predictor is the pool average
//!
//! ```text
//! f̃T(x2, x3) = (1/n) Σ_i f_S(x1_i, x2) + hθ(x1_i, x2) · (x3 − μ3)
//! ```
//!
//! This module also holds the parametric route for the polynomial class, the
//! second-order and two-unobserved-variable extensions, and composition of two
//! source regressors through a shared child variable.

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{OovError, Result};
use crate::linalg::{least_squares, singular_values_2x2, solve};
use crate::moments::{residual_powers, MomentSummary};
use crate::regressor::{
    epoch_batches, init_model, train, FeedforwardRegressor, LossSpec, Optimizer, TrainConfig,
};
use crate::scm::{derive_seed, seeded_rng, EnvironmentDataset, PolyPredictor};
use crate::surface::{mean, Curve, Surface, TargetPredictor};

/// `|k3|` below this (on the standardized covariate scale) carries no usable signal.
pub const SKEW_DEGENERACY_THRESHOLD: f64 = 1e-3;

/// Condition number above which the two-unknown moment system is rejected.
pub const MOMENT_CONDITION_LIMIT: f64 = 1e8;

fn check_skew(k3: f64, threshold: f64) -> Result<()> {
    if !k3.is_finite() || k3.abs() < threshold {
        return Err(OovError::SkewDegenerate { k3, threshold });
    }
    Ok(())
}

fn source_inputs(source: &EnvironmentDataset) -> Result<(Array2<f64>, &[f64])> {
    let x = source.select(&["X1", "X2"])?;
    let y = source.require_target()?;
    if y.is_empty() {
        return Err(OovError::Empty("source environment"));
    }
    Ok((x, y))
}

fn surface_on_rows<S: Surface>(f: &S, x: &Array2<f64>) -> Vec<f64> {
    let a: Vec<f64> = x.column(0).to_vec();
    let b: Vec<f64> = x.column(1).to_vec();
    f.eval_pairs(&a, &b)
}

/// Learned slope of φ in the unobserved variable, with the moments it was fit against.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DerivativeModel<H = FeedforwardRegressor> {
    /// `hθ(x1, x2) ≈ ∂φ/∂x3` at `x3 = μ3`.
    pub slope: H,
    /// Coefficient of `(x3 − μ3)²` in the second-order expansion, when fit.
    pub curvature: Option<H>,
    pub mu3: f64,
    pub k3: f64,
    pub m2: f64,
}

impl<H> DerivativeModel<H> {
    pub fn first_order(slope: H, mu3: f64, k3: f64, m2: f64) -> Self {
        Self { slope, curvature: None, mu3, k3, m2 }
    }
}

/// Tuning for the slope fit beyond the network's own training configuration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SkewFitOptions {
    pub degeneracy_threshold: f64,
    /// `E[ε³]`, subtracted from the cubed residuals. Zero for Gaussian noise.
    pub noise_third_moment: f64,
}

impl Default for SkewFitOptions {
    fn default() -> Self {
        Self { degeneracy_threshold: SKEW_DEGENERACY_THRESHOLD, noise_third_moment: 0.0 }
    }
}

pub fn fit_skew_derivative<S: Surface>(
    source: &EnvironmentDataset,
    f_s: &S,
    x3_moments: &MomentSummary,
    config: &TrainConfig,
) -> Result<DerivativeModel> {
    fit_skew_derivative_with(source, f_s, x3_moments, config, &SkewFitOptions::default())
}

pub fn fit_skew_derivative_with<S: Surface>(
    source: &EnvironmentDataset,
    f_s: &S,
    x3_moments: &MomentSummary,
    config: &TrainConfig,
    options: &SkewFitOptions,
) -> Result<DerivativeModel> {
    let k3 = x3_moments.skew();
    check_skew(k3, options.degeneracy_threshold)?;
    let (x, y) = source_inputs(source)?;
    let predictions = surface_on_rows(f_s, &x);
    let mut z = residual_powers(y, &predictions, 3)?;
    if options.noise_third_moment != 0.0 {
        z.iter_mut().for_each(|v| *v -= options.noise_third_moment);
    }
    let slope = train(&x, &z, LossSpec::cubed(k3)?, config)?;
    Ok(DerivativeModel::first_order(slope, x3_moments.mean, k3, x3_moments.variance()))
}

/// The zero-shot target predictor: source model, slope model and a frozen `X1` pool.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZeroShotPredictor<S = FeedforwardRegressor, H = FeedforwardRegressor> {
    pub source: S,
    pub derivative: DerivativeModel<H>,
    pub pool: Vec<f64>,
}

impl<S: Surface, H: Surface> ZeroShotPredictor<S, H> {
    pub fn new(source: S, derivative: DerivativeModel<H>, pool: Vec<f64>) -> Result<Self> {
        if pool.is_empty() {
            return Err(OovError::Empty("Monte-Carlo pool"));
        }
        Ok(Self { source, derivative, pool })
    }

    /// Pool averages of `f_S`, `hθ` and (if present) the curvature model at `x2`.
    pub fn pool_averages(&self, x2: f64) -> (f64, f64, f64) {
        let base = mean(&self.source.eval_column(&self.pool, x2));
        let slope = mean(&self.derivative.slope.eval_column(&self.pool, x2));
        let curv = self
            .derivative
            .curvature
            .as_ref()
            .map(|c| mean(&c.eval_column(&self.pool, x2)))
            .unwrap_or(0.0);
        (base, slope, curv)
    }

    fn combine(&self, (base, slope, curv): (f64, f64, f64), x3: f64) -> f64 {
        let d = x3 - self.derivative.mu3;
        let mut out = base + slope * d;
        if self.derivative.curvature.is_some() {
            out += curv * (d * d - self.derivative.m2);
        }
        out
    }

    /// Pool standard error of the summand at `(x2, x3)`.
    pub fn pool_standard_error(&self, x2: f64, x3: f64) -> f64 {
        let base = self.source.eval_column(&self.pool, x2);
        let slope = self.derivative.slope.eval_column(&self.pool, x2);
        let d = x3 - self.derivative.mu3;
        let terms: Vec<f64> = base.iter().zip(&slope).map(|(b, s)| b + s * d).collect();
        let m = mean(&terms);
        let n = terms.len() as f64;
        if terms.len() < 2 {
            return 0.0;
        }
        (terms.iter().map(|t| (t - m).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt()
    }
}

impl<S: Surface, H: Surface> TargetPredictor for ZeroShotPredictor<S, H> {
    fn predict_target(&self, x2: f64, x3: f64) -> f64 {
        zero_shot_predict(self, x2, x3)
    }

    fn predict_grid(&self, x2s: &[f64], x3s: &[f64]) -> Array2<f64> {
        let mut grid = Array2::zeros((x2s.len(), x3s.len()));
        for (i, &x2) in x2s.iter().enumerate() {
            let avg = self.pool_averages(x2);
            for (j, &x3) in x3s.iter().enumerate() {
                grid[[i, j]] = self.combine(avg, x3);
            }
        }
        grid
    }
}

pub fn zero_shot_predict<S: Surface, H: Surface>(p: &ZeroShotPredictor<S, H>, x2: f64, x3: f64) -> f64 {
    p.combine(p.pool_averages(x2), x3)
}

/// Draws `n` values uniformly with replacement from the source `X1` column.
pub fn sample_pool(source: &EnvironmentDataset, n: usize, seed: u64) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(OovError::InsufficientSamples { needed: 1, got: 0 });
    }
    let x1 = source.column("X1")?;
    if x1.is_empty() {
        return Err(OovError::Empty("source environment"));
    }
    let mut rng = seeded_rng(seed);
    Ok((0..n).map(|_| x1[rng.random_range(0..x1.len())]).collect())
}

pub fn build_predictor<S: Surface, H: Surface>(
    f_s: S,
    dm: DerivativeModel<H>,
    source: &EnvironmentDataset,
    n: usize,
    seed: u64,
) -> Result<ZeroShotPredictor<S, H>> {
    let pool = sample_pool(source, n, seed)?;
    ZeroShotPredictor::new(f_s, dm, pool)
}

fn poly_features(x1: f64, x2: f64) -> [f64; 4] {
    [1.0, x1, x2, x1 * x2]
}

const PARAMETRIC_REWEIGHT_ROUNDS: usize = 4;

fn dot4(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Covariance `[Var r², Cov(r², r³), Var r³]` of `r = p·U + ε` for centered
/// `U` with central moments `central[0..=6]` and `ε ~ N(0, σ²)`.
fn residual_power_covariance(p: f64, central: &[f64; 7], noise_var: f64) -> [f64; 3] {
    let gauss = [1.0, 0.0, noise_var, 0.0, 3.0 * noise_var.powi(2), 0.0, 15.0 * noise_var.powi(3)];
    let raw = |k: usize| -> f64 {
        (0..=k).map(|j| binomial(k, j) * p.powi(j as i32) * central[j] * gauss[k - j]).sum()
    };
    let (e2, e3) = (raw(2), raw(3));
    [raw(4) - e2 * e2, raw(5) - e2 * e3, raw(6) - e3 * e3]
}

/// `[l00, l10, l11]` with `‖(l00 e2 + l10 e3, l11 e3)‖² = eᵀ Σ⁻¹ e`.
fn inverse_cholesky([a, b, c]: [f64; 3], floor: f64) -> [f64; 3] {
    let a = a.max(floor);
    let c = c.max(floor);
    let det = (a * c - b * b).max(floor * floor);
    let (i00, i01, i11) = (c / det, -b / det, a / det);
    let l00 = i00.sqrt();
    let l10 = i01 / l00;
    [l00, l10, (i11 - l10 * l10).max(0.0).sqrt()]
}

/// Gauss–Newton with Levenberg damping for `min Σ r(θ)²`. `residuals`
/// appends the residuals and Jacobian rows for a parameter vector.
fn levenberg_marquardt<F>(residuals: F, mut theta: Vec<f64>) -> Vec<f64>
where
    F: Fn(&[f64], &mut Vec<f64>, &mut Vec<f64>),
{
    let p = theta.len();
    let (mut res, mut jac) = (Vec::new(), Vec::new());
    let objective = |t: &[f64], res: &mut Vec<f64>, jac: &mut Vec<f64>| {
        res.clear();
        jac.clear();
        residuals(t, res, jac);
        res.iter().map(|r| r * r).sum::<f64>()
    };
    let mut current = objective(&theta, &mut res, &mut jac);
    let mut damping = 1e-3;
    for _ in 0..500 {
        objective(&theta, &mut res, &mut jac);
        let mut jtj = vec![0.0; p * p];
        let mut jtr = vec![0.0; p];
        for (r, row) in res.iter().zip(jac.chunks(p)) {
            for i in 0..p {
                jtr[i] -= row[i] * r;
                for j in 0..p {
                    jtj[i * p + j] += row[i] * row[j];
                }
            }
        }
        let mut improved = false;
        while damping < 1e12 {
            let mut a = jtj.clone();
            for i in 0..p {
                a[i * p + i] += damping * jtj[i * p + i].max(1e-12);
            }
            let Ok(step) = solve(a, jtr.clone()) else {
                damping *= 10.0;
                continue;
            };
            let candidate: Vec<f64> = theta.iter().zip(&step).map(|(t, s)| t + s).collect();
            let value = objective(&candidate, &mut res, &mut jac);
            if value < current {
                let rel = (current - value) / current.max(1e-300);
                theta = candidate;
                current = value;
                damping = (damping / 10.0).max(1e-12);
                improved = rel > 1e-14;
                break;
            }
            damping *= 10.0;
        }
        if !improved {
            break;
        }
    }
    theta
}

/// Least-squares source predictor over `(1, x1, x2, x1x2)`.
pub fn fit_source_poly(source: &EnvironmentDataset) -> Result<PolyPredictor> {
    let (x, y) = source_inputs(source)?;
    let c = least_squares(
        x.rows().into_iter().map(|r| poly_features(r[0], r[1]).to_vec()),
        y,
        4,
    )?;
    Ok(PolyPredictor::new(c[0], c[1], c[2], c[3]))
}

/// Fits `θ` in `Z / k3 ≈ (θ · [1, x1, x2, x1x2])³` by Levenberg–Marquardt.
///
/// For the polynomial class, `θ` estimates `(α3, α5, α6, α7)`.
pub fn fit_parametric_poly(
    source: &EnvironmentDataset,
    f_s_coeffs: &PolyPredictor,
    x3_moments: &MomentSummary,
) -> Result<[f64; 4]> {
    let k3 = x3_moments.skew();
    check_skew(k3, SKEW_DEGENERACY_THRESHOLD)?;
    let (x, y) = source_inputs(source)?;
    let feats: Vec<[f64; 4]> = x.rows().into_iter().map(|r| poly_features(r[0], r[1])).collect();
    let w: Vec<f64> = feats
        .iter()
        .zip(y)
        .map(|(g, &yi)| {
            let r = yi - f_s_coeffs.eval(g[1], g[2]);
            r * r * r / k3
        })
        .collect();
    let v: Vec<f64> = feats
        .iter()
        .zip(y)
        .map(|(g, &yi)| (yi - f_s_coeffs.eval(g[1], g[2])).powi(2))
        .collect();

    // The conditional second and third residual moments are `m2 p² + σ²`
    // and `k3 p³` with `p = θ·g`. Both are matched jointly, whitened by
    // their conditional covariance evaluated at the previous round's fit.
    let (m2, m3, m4, m5, m6) = (
        x3_moments.order(2)?,
        k3,
        x3_moments.order(4)?,
        x3_moments.order(5)?,
        x3_moments.order(6)?,
    );
    let central = [1.0, 0.0, m2, m3, m4, m5, m6];

    let mut theta = vec![mean(&w).cbrt(), 0.0, 0.0, 0.0, 0.0];
    let mut whitening: Vec<[f64; 3]> = vec![[1.0, 0.0, 1.0]; feats.len()];
    for _ in 0..PARAMETRIC_REWEIGHT_ROUNDS {
        let wh = &whitening;
        theta = levenberg_marquardt(
            |t, res, jac| {
                let th = [t[0], t[1], t[2], t[3]];
                for ((g, (&wi, &vi)), &[l00, l10, l11]) in feats.iter().zip(w.iter().zip(&v)).zip(wh) {
                    let p = dot4(g, &th);
                    let e2 = vi - m2 * p * p - t[4];
                    let e3 = (wi - p * p * p) * k3;
                    res.push(l00 * e2 + l10 * e3);
                    res.push(l11 * e3);
                    let d2 = -2.0 * m2 * p;
                    let d3 = -3.0 * p * p * k3;
                    for gi in g {
                        jac.push((l00 * d2 + l10 * d3) * gi);
                    }
                    jac.push(-l00);
                    for gi in g {
                        jac.push(l11 * d3 * gi);
                    }
                    jac.push(0.0);
                }
            },
            theta,
        );
        let th = [theta[0], theta[1], theta[2], theta[3]];
        let noise_var = theta[4].max(0.0);
        let covs: Vec<[f64; 3]> =
            feats.iter().map(|g| residual_power_covariance(dot4(g, &th), &central, noise_var)).collect();
        // Floor the determinant so near-zero slopes without noise stay well posed.
        let scale = mean(&covs.iter().map(|c| c[0] + c[2]).collect::<Vec<_>>()).max(1e-300);
        whitening = covs.iter().map(|&c| inverse_cholesky(c, 1e-6 * scale)).collect();
    }
    let theta = [theta[0], theta[1], theta[2], theta[3]];
    if theta.iter().any(|t| !t.is_finite()) {
        return Err(OovError::NonFinite("parametric slope coefficients".into()));
    }
    Ok(theta)
}

/// Recovers the target predictor over `(1, x2, x3, x2x3)` from the source
/// coefficients and the slope coefficients `θ = (α3, α5, α6, α7)`.
///
/// The source predictor is `c0 + c1 x1 + c2 x2 + c3 x1x2` with
/// `c0 = α0 + α3 μ3`, `c1 = α1 + α5 μ3`, `c2 = α2 + α6 μ3`, `c3 = α4 + α7 μ3`,
/// where `α0` is an intercept (zero for the pure polynomial class).
pub fn recover_target_coefficients(theta: &[f64; 4], f_s: &PolyPredictor, mu1: f64, mu3: f64) -> PolyPredictor {
    let [a3, a5, a6, a7] = *theta;
    let a0 = f_s.c0 - a3 * mu3;
    let a1 = f_s.c1 - a5 * mu3;
    let a2 = f_s.c2 - a6 * mu3;
    let a4 = f_s.c3 - a7 * mu3;
    PolyPredictor::new(a0 + a1 * mu1, a2 + a4 * mu1, a3 + a5 * mu1, a6 + a7 * mu1)
}

/// Residual moment targets `r² − σ²` and `r³ − E[ε³]`, and the model
/// moments they are matched against, for a pair of surrogate outputs.
trait MomentEquations {
    /// Returns `(M2, M3, ∂M2/∂a, ∂M2/∂b, ∂M3/∂a, ∂M3/∂b)`.
    fn eval(&self, a: f64, b: f64) -> [f64; 6];
}

/// Second-order expansion in one variable: `a = f′(μ)`, `b` = coefficient of `(x − μ)²`.
struct SecondOrderEquations {
    m2: f64,
    m3: f64,
    q4: f64,
    q5: f64,
    q6: f64,
}

impl SecondOrderEquations {
    fn new(m: &MomentSummary) -> Result<Self> {
        let (m2, m3, m4, m5, m6) = (m.order(2)?, m.order(3)?, m.order(4)?, m.order(5)?, m.order(6)?);
        Ok(Self {
            m2,
            m3,
            q4: m4 - m2 * m2,
            q5: m5 - 2.0 * m2 * m3,
            q6: m6 - 3.0 * m2 * m4 + 2.0 * m2 * m2 * m2,
        })
    }
}

impl MomentEquations for SecondOrderEquations {
    fn eval(&self, a: f64, b: f64) -> [f64; 6] {
        let Self { m2, m3, q4, q5, q6 } = *self;
        [
            a * a * m2 + 2.0 * a * b * m3 + b * b * q4,
            a * a * a * m3 + 3.0 * a * a * b * q4 + 3.0 * a * b * b * q5 + b * b * b * q6,
            2.0 * a * m2 + 2.0 * b * m3,
            2.0 * a * m3 + 2.0 * b * q4,
            3.0 * a * a * m3 + 6.0 * a * b * q4 + 3.0 * b * b * q5,
            3.0 * a * a * q4 + 6.0 * a * b * q5 + 3.0 * b * b * q6,
        ]
    }
}

/// Population residual moments `(E[r²], E[r³])` implied by a second-order
/// expansion with slope `a` and curvature coefficient `b`, plus noise.
pub fn second_order_residual_moments(a: f64, b: f64, x3: &MomentSummary, noise_sd: f64) -> Result<(f64, f64)> {
    let eq = SecondOrderEquations::new(x3)?;
    let [m2, m3, ..] = eq.eval(a, b);
    Ok((m2 + noise_sd * noise_sd, m3))
}

/// Damped Newton solve of `(M2(a, b), M3(a, b)) = (t2, t3)` started from `init`.
/// Returns `None` when the iteration does not settle on a root.
fn solve_moment_pair<E: MomentEquations>(equations: &E, t2: f64, t3: f64, init: (f64, f64)) -> Option<(f64, f64)> {
    let (mut a, mut b) = init;
    let (s2, s3) = (t2.abs().max(1e-12), t3.abs().max(1e-12));
    let norm = |m2: f64, m3: f64| ((m2 - t2) / s2).powi(2) + ((m3 - t3) / s3).powi(2);
    for _ in 0..100 {
        let [m2, m3, d2a, d2b, d3a, d3b] = equations.eval(a, b);
        let current = norm(m2, m3);
        if current < 1e-20 {
            break;
        }
        let step = solve(vec![d2a, d2b, d3a, d3b], vec![t2 - m2, t3 - m3]).ok()?;
        let mut lambda = 1.0;
        loop {
            let (na, nb) = (a + lambda * step[0], b + lambda * step[1]);
            let [n2, n3, ..] = equations.eval(na, nb);
            if norm(n2, n3) < current {
                a = na;
                b = nb;
                break;
            }
            lambda *= 0.5;
            if lambda < 1e-6 {
                return None;
            }
        }
    }
    let [m2, m3, ..] = equations.eval(a, b);
    (norm(m2, m3) < 1e-8 && a.is_finite() && b.is_finite()).then_some((a, b))
}

struct JointFitSetup {
    init: (f64, f64),
    scale: (f64, f64),
}

/// Trains two single-output networks on shared inputs so that their outputs
/// `(a, b)` satisfy both residual moment equations pointwise.
fn joint_moment_fit<E: MomentEquations>(
    inputs: &Array2<f64>,
    t2: &[f64],
    t3: &[f64],
    equations: &E,
    setup: JointFitSetup,
    config: &TrainConfig,
) -> Result<(FeedforwardRegressor, FeedforwardRegressor)> {
    config.validate()?;
    let n = t2.len();
    let mut rng = seeded_rng(config.seed);
    let mut net_a = init_model(inputs, config, &mut rng)?;
    let mut net_b = init_model(inputs, config, &mut rng)?;
    net_a.set_output_affine(0.0, setup.scale.0);
    net_b.set_output_affine(0.0, setup.scale.1);
    *net_a.output_bias_mut() = setup.init.0 / setup.scale.0;
    *net_b.output_bias_mut() = setup.init.1 / setup.scale.1;
    let w2 = 1.0 / (t2.iter().map(|v| v * v).sum::<f64>() / n as f64).max(1e-300);
    let w3 = 1.0 / (t3.iter().map(|v| v * v).sum::<f64>() / n as f64).max(1e-300);
    let mut opt_a = Optimizer::new(&net_a, config);
    let mut opt_b = Optimizer::new(&net_b, config);
    for epoch in 0..config.epochs {
        opt_a.start_epoch(config.schedule, epoch, config.epochs);
        opt_b.start_epoch(config.schedule, epoch, config.epochs);
        let mut total = 0.0;
        for batch in epoch_batches(n, config.batch_size, &mut rng) {
            let x = inputs.select(Axis(0), &batch);
            let (out_a, cache_a) = net_a.forward(x.view())?;
            let (out_b, cache_b) = net_b.forward(x.view())?;
            let bsz = batch.len() as f64;
            let mut da = Vec::with_capacity(batch.len());
            let mut db = Vec::with_capacity(batch.len());
            for (k, &i) in batch.iter().enumerate() {
                let [m2, m3, d2a, d2b, d3a, d3b] = equations.eval(out_a[k], out_b[k]);
                let r2 = m2 - t2[i];
                let r3 = m3 - t3[i];
                total += w2 * r2 * r2 + w3 * r3 * r3;
                da.push(2.0 * (w2 * r2 * d2a + w3 * r3 * d3a) / bsz);
                db.push(2.0 * (w2 * r2 * d2b + w3 * r3 * d3b) / bsz);
            }
            let grad_a = net_a.backward(&cache_a, &da);
            let grad_b = net_b.backward(&cache_b, &db);
            opt_a.step(&mut net_a, grad_a);
            opt_b.step(&mut net_b, grad_b);
        }
        if !total.is_finite() {
            return Err(OovError::Divergence { epoch });
        }
    }
    Ok((net_a, net_b))
}

/// Jointly fits the slope and the curvature coefficient of φ in `x3` from the
/// second and third residual moments under a second-order expansion.
///
/// The curvature model estimates `c` in `φ ≈ φ(μ3) + f′·(x3 − μ3) + c·(x3 − μ3)²`,
/// i.e. half the second derivative.
pub fn fit_second_order<S: Surface>(
    source: &EnvironmentDataset,
    f_s: &S,
    x3_moments: &MomentSummary,
    noise_sd: f64,
    config: &TrainConfig,
) -> Result<DerivativeModel> {
    let k3 = x3_moments.skew();
    check_skew(k3, SKEW_DEGENERACY_THRESHOLD)?;
    let equations = SecondOrderEquations::new(x3_moments)?;
    let (x, y) = source_inputs(source)?;
    let predictions = surface_on_rows(f_s, &x);
    let r = residual_powers(y, &predictions, 2)?;
    let sigma2 = noise_sd * noise_sd;
    let t2: Vec<f64> = r.iter().map(|v| v - sigma2).collect();
    let t3 = residual_powers(y, &predictions, 3)?;
    let stage = |k: u64| config.clone().with_seed(derive_seed(config.seed, k));
    let g2 = train(&x, &t2, LossSpec::MeanSquared, &stage(1))?;
    let g3 = train(&x, &t3, LossSpec::MeanSquared, &stage(2))?;
    let (e2, e3) = (g2.predict(&x)?, g3.predict(&x)?);
    let mut a = Vec::with_capacity(e2.len());
    let mut b = Vec::with_capacity(e2.len());
    let mut keep = Vec::with_capacity(e2.len());
    for (i, (&v2, &v3)) in e2.iter().zip(&e3).enumerate() {
        if let Some((sa, sb)) = solve_moment_pair(&equations, v2, v3, ((v3 / k3).cbrt(), 0.0)) {
            a.push(sa);
            b.push(sb);
            keep.push(i);
        }
    }
    if keep.len() < e2.len() / 2 {
        return Err(OovError::DegenerateMoments { condition: f64::INFINITY });
    }
    let xk = x.select(Axis(0), &keep);
    let slope = train(&xk, &a, LossSpec::MeanSquared, &stage(3))?;
    let curvature = train(&xk, &b, LossSpec::MeanSquared, &stage(4))?;
    Ok(DerivativeModel {
        slope,
        curvature: Some(curvature),
        mu3: x3_moments.mean,
        k3,
        m2: x3_moments.variance(),
    })
}

/// Central cross-moments `E[(U − μu)^j (V − μv)^k]` for `j + k ≤ 4`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossMoments {
    pub mean: [f64; 2],
    /// `m[j][k]`; entries with `j + k > 4` are unused.
    pub m: [[f64; 5]; 5],
}

impl CrossMoments {
    pub fn from_samples(u: &[f64], v: &[f64]) -> Result<Self> {
        if u.len() != v.len() {
            return Err(OovError::LengthMismatch { left: u.len(), right: v.len() });
        }
        if u.len() < 2 {
            return Err(OovError::InsufficientSamples { needed: 2, got: u.len() });
        }
        let (mu, mv) = (mean(u), mean(v));
        let mut m = [[0.0; 5]; 5];
        for (&a, &b) in u.iter().zip(v) {
            let (da, db) = (a - mu, b - mv);
            for j in 0..=4 {
                for k in 0..=(4 - j) {
                    m[j][k] += da.powi(j as i32) * db.powi(k as i32);
                }
            }
        }
        let n = u.len() as f64;
        m.iter_mut().flatten().for_each(|x| *x /= n);
        Ok(Self { mean: [mu, mv], m })
    }

    /// Matrix of third-order cross-moments `[[M30, M21], [M12, M03]]`.
    pub fn third_order_matrix(&self) -> [f64; 4] {
        [self.m[3][0], self.m[2][1], self.m[1][2], self.m[0][3]]
    }

    /// Condition number of [`Self::third_order_matrix`].
    pub fn condition_number(&self) -> f64 {
        let [a, b, c, d] = self.third_order_matrix();
        let (big, small) = singular_values_2x2(a, b, c, d);
        if big == 0.0 {
            f64::INFINITY
        } else if small == 0.0 {
            f64::INFINITY
        } else {
            big / small
        }
    }

    fn power_moment(&self, a: f64, b: f64, order: usize) -> f64 {
        (0..=order)
            .map(|k| binomial(order, k) * a.powi(k as i32) * b.powi((order - k) as i32) * self.m[k][order - k])
            .sum()
    }
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

struct BivariateEquations<'a>(&'a CrossMoments);

impl MomentEquations for BivariateEquations<'_> {
    fn eval(&self, a: f64, b: f64) -> [f64; 6] {
        let m = &self.0.m;
        [
            a * a * m[2][0] + 2.0 * a * b * m[1][1] + b * b * m[0][2],
            a * a * a * m[3][0] + 3.0 * a * a * b * m[2][1] + 3.0 * a * b * b * m[1][2] + b * b * b * m[0][3],
            2.0 * a * m[2][0] + 2.0 * b * m[1][1],
            2.0 * a * m[1][1] + 2.0 * b * m[0][2],
            3.0 * a * a * m[3][0] + 6.0 * a * b * m[2][1] + 3.0 * b * b * m[1][2],
            3.0 * a * a * m[2][1] + 6.0 * a * b * m[1][2] + 3.0 * b * b * m[0][3],
        ]
    }
}

/// Constant slopes `(a, b)` solving the bivariate system for the pooled
/// targets `(T2, T3)`. Several roots can exist; the one whose implied fourth
/// residual moment is closest to `t4` is returned.
fn constant_bivariate_root(cm: &CrossMoments, t2: f64, t3: f64, t4: f64, noise_var: f64) -> (f64, f64) {
    if t2 <= 0.0 {
        return (0.0, 0.0);
    }
    let eq = BivariateEquations(cm);
    let point = |theta: f64| {
        let (c, s) = (theta.cos(), theta.sin());
        let q = eq.eval(c, s)[0].max(1e-300);
        let rho = (t2 / q).sqrt();
        (rho * c, rho * s)
    };
    let gap = |theta: f64| {
        let (a, b) = point(theta);
        eq.eval(a, b)[1] - t3
    };
    let steps = 3600;
    let mut roots = Vec::new();
    let mut prev = gap(0.0);
    for i in 1..=steps {
        let theta = std::f64::consts::TAU * i as f64 / steps as f64;
        let cur = gap(theta);
        if prev == 0.0 || prev.signum() != cur.signum() {
            let (mut lo, mut hi) = (std::f64::consts::TAU * (i - 1) as f64 / steps as f64, theta);
            for _ in 0..80 {
                let mid = 0.5 * (lo + hi);
                if gap(lo).signum() == gap(mid).signum() {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            roots.push(point(0.5 * (lo + hi)));
        }
        prev = cur;
    }
    let fourth = |(a, b): (f64, f64)| {
        let e2 = eq.eval(a, b)[0];
        cm.power_moment(a, b, 4) + 6.0 * noise_var * e2 + 3.0 * noise_var * noise_var
    };
    roots
        .into_iter()
        .min_by(|&p, &q| (fourth(p) - t4).abs().total_cmp(&(fourth(q) - t4).abs()))
        .unwrap_or((0.0, 0.0))
}

/// Two first-order partials of φ over two unobserved covariates `(U, V)`,
/// learned from a source that observes only `(X1, Y)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BivariateDerivatives {
    /// `∂φ/∂u` as a function of `x1`.
    pub du: FeedforwardRegressor,
    /// `∂φ/∂v` as a function of `x1`.
    pub dv: FeedforwardRegressor,
    pub moments: CrossMoments,
}

pub fn fit_bivariate_derivatives<C: Curve>(
    source: &EnvironmentDataset,
    f_s: &C,
    cross: &CrossMoments,
    noise_sd: f64,
    config: &TrainConfig,
) -> Result<BivariateDerivatives> {
    let condition = cross.condition_number();
    if !(condition <= MOMENT_CONDITION_LIMIT) {
        return Err(OovError::DegenerateMoments { condition });
    }
    let x = source.select(&["X1"])?;
    let y = source.require_target()?;
    if y.is_empty() {
        return Err(OovError::Empty("source environment"));
    }
    let predictions = f_s.eval_many(&x.column(0).to_vec());
    let sigma2 = noise_sd * noise_sd;
    let t2: Vec<f64> = residual_powers(y, &predictions, 2)?.iter().map(|v| v - sigma2).collect();
    let t3 = residual_powers(y, &predictions, 3)?;
    let t4 = mean(&y.iter().zip(&predictions).map(|(a, b)| (a - b).powi(4)).collect::<Vec<_>>());
    let init = constant_bivariate_root(cross, mean(&t2), mean(&t3), t4, sigma2);
    let scale = (mean(&t2).max(1e-12) / (cross.m[2][0] + cross.m[0][2]).max(1e-300)).sqrt();
    let (du, dv) = joint_moment_fit(
        &x,
        &t2,
        &t3,
        &BivariateEquations(cross),
        JointFitSetup { init, scale: (scale, scale) },
        config,
    )?;
    Ok(BivariateDerivatives { du, dv, moments: cross.clone() })
}

/// `pa ↦ f_S1(ĝ(pa))`: outcome model over the shared child composed with the
/// learned parent-to-child map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompositionPredictor {
    /// `f_S1: z → y`
    pub outcome: FeedforwardRegressor,
    /// `ĝ: pa → z`
    pub mediator: FeedforwardRegressor,
}

impl CompositionPredictor {
    pub fn new(outcome: FeedforwardRegressor, mediator: FeedforwardRegressor) -> Result<Self> {
        if outcome.input_width() != 1 {
            return Err(OovError::ShapeMismatch("outcome model must take the single child variable".into()));
        }
        Ok(Self { outcome, mediator })
    }

    pub fn predict(&self, parents: ArrayView2<f64>) -> Result<Vec<f64>> {
        let z = self.mediator.predict_view(parents)?;
        let z = Array2::from_shape_vec((z.len(), 1), z).expect("column");
        self.outcome.predict(&z)
    }
}

/// Trains `f_S1` on `(Z, Y)` and `ĝ` on `(PA, Z)`, both by mean squared error.
/// `env_s2` holds the parents and the child column named `child`.
pub fn compose_possibility(
    env_s1: &EnvironmentDataset,
    env_s2: &EnvironmentDataset,
    child: &str,
    config: &TrainConfig,
) -> Result<CompositionPredictor> {
    if env_s1.n_rows() == 0 || env_s2.n_rows() == 0 {
        return Err(OovError::Empty("composition environments"));
    }
    let z1 = env_s1.select(&[child])?;
    let y = env_s1.require_target()?;
    let outcome = train(&z1, y, LossSpec::MeanSquared, config)?;
    let parents: Vec<&str> = env_s2.names().iter().map(String::as_str).filter(|n| *n != child).collect();
    if parents.is_empty() {
        return Err(OovError::InvalidConfig("second environment has no parent columns".into()));
    }
    let pa = env_s2.select(&parents)?;
    let z2 = env_s2.column(child)?.to_vec();
    let mediator = train(&pa, &z2, LossSpec::MeanSquared, &config.clone().with_seed(config.seed ^ 0x5A5A))?;
    CompositionPredictor::new(outcome, mediator)
}
