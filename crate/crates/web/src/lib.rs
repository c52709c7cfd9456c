//! WebAssembly bindings for the browser demo. Each operation has a plain
//! Rust entry point returning JSON plus a thin `wasm_bindgen` wrapper.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use oov::baselines::marginal_baseline;
use oov::moments::central_moments;
use oov::scm::{analytic_target_predictor, sample_joint, sample_joint_with, seeded_rng, GeneratingFunction, ScmConfig};
use oov::surface::{linspace, mean, TargetPredictor};
use oov::theory::{consistency_residuals, default_x2_grid, perturb_binary, table_distance, BinaryOovInstance, BinaryTable};
use oov::transfer::{fit_parametric_poly, fit_source_poly, recover_target_coefficients, sample_pool};

fn to_json<T: Serialize>(value: &T) -> Result<String, String> {
    serde_json::to_string(value).map_err(|e| e.to_string())
}

fn grid_rows(p: &dyn TargetPredictor, x2: &[f64], x3: &[f64]) -> Vec<Vec<f64>> {
    p.predict_grid(x2, x3).outer_iter().map(|r| r.to_vec()).collect()
}

fn grid_mse(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let sq: Vec<f64> = a.iter().flatten().zip(b.iter().flatten()).map(|(x, y)| (x - y).powi(2)).collect();
    mean(&sq)
}

#[derive(Serialize)]
struct TransferContours {
    x2: Vec<f64>,
    x3: Vec<f64>,
    theta: [f64; 4],
    truth: Vec<Vec<f64>>,
    proposed: Vec<Vec<f64>>,
    marginal: Vec<Vec<f64>>,
    mse_proposed: f64,
    mse_marginal: f64,
}

/// Samples a polynomial mechanism with coefficients `alpha`, recovers the
/// target regression through the parametric route and returns the true,
/// recovered and marginal surfaces on a `resolution × resolution` grid over `[0, 5]²`.
pub fn transfer_contours_json(alpha: &[f64], rows: usize, seed: u64, resolution: usize) -> Result<String, String> {
    let alpha: [f64; 7] = alpha.try_into().map_err(|_| format!("expected 7 coefficients, got {}", alpha.len()))?;
    if !(2..=200).contains(&resolution) {
        return Err(format!("resolution must lie in 2..=200, got {resolution}"));
    }
    let cfg = ScmConfig::default().with_seed(seed);
    let func = GeneratingFunction::polynomial(alpha);
    let run = || -> oov::Result<TransferContours> {
        let (joint, transform) = sample_joint(&cfg, &func, rows)?;
        let source = joint.project(&["X1", "X2"], true)?;
        let x3 = central_moments(&joint.column("X3")?.to_vec(), 6)?;
        let f_s = fit_source_poly(&source)?;
        let theta = fit_parametric_poly(&source, &f_s, &x3)?;
        let mu1 = mean(&source.column("X1")?.to_vec());
        let proposed = recover_target_coefficients(&theta, &f_s, mu1, x3.mean);
        let truth = analytic_target_predictor(&func, transform.mean_of(0, &cfg.covariates))?;
        let marginal = marginal_baseline(f_s, sample_pool(&source, 1000, seed ^ 0xB0B)?)?;
        let axis = linspace(0.0, 5.0, resolution);
        let truth = grid_rows(&truth, &axis, &axis);
        let proposed = grid_rows(&proposed, &axis, &axis);
        let marginal = grid_rows(&marginal, &axis, &axis);
        Ok(TransferContours {
            mse_proposed: grid_mse(&proposed, &truth),
            mse_marginal: grid_mse(&marginal, &truth),
            x2: axis.clone(),
            x3: axis,
            theta,
            truth,
            proposed,
            marginal,
        })
    };
    to_json(&run().map_err(|e| e.to_string())?)
}

#[derive(Serialize)]
struct MomentCheck {
    predicted: [f64; 2],
    empirical: [f64; 2],
    standard_error: [f64; 2],
    /// Residual histogram: left bin edges and counts.
    bin_edges: Vec<f64>,
    counts: Vec<usize>,
}

fn mean_and_se(v: &[f64]) -> (f64, f64) {
    let m = mean(v);
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len().max(2) - 1) as f64;
    (m, (var / v.len() as f64).sqrt())
}

/// Draws `Y = slope·X3 + ε` and compares the residual second and third
/// moments with `slope²·m2 + σ²` and `slope³·m3`.
pub fn moment_identity_json(slope: f64, draws: usize, seed: u64) -> Result<String, String> {
    if !(100..=2_000_000).contains(&draws) {
        return Err(format!("draws must lie in 100..=2000000, got {draws}"));
    }
    let cfg = ScmConfig::default().with_seed(seed);
    let run = || -> oov::Result<MomentCheck> {
        let (joint, transform) = sample_joint_with(&cfg, draws, move |_, _, c| slope * c)?;
        let mu3 = transform.mean_of(2, &cfg.covariates);
        let m2 = transform.central_moment_of(2, &cfg.covariates, 2)?;
        let m3 = transform.central_moment_of(2, &cfg.covariates, 3)?;
        let y = joint.require_target()?;
        let r: Vec<f64> = y.iter().map(|v| v - slope * mu3).collect();
        let (e2, se2) = mean_and_se(&r.iter().map(|v| v * v).collect::<Vec<_>>());
        let (e3, se3) = mean_and_se(&r.iter().map(|v| v * v * v).collect::<Vec<_>>());
        let (lo, hi) = r.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        let bins = 60;
        let width = ((hi - lo) / bins as f64).max(1e-12);
        let mut counts = vec![0usize; bins];
        for v in &r {
            counts[(((v - lo) / width) as usize).min(bins - 1)] += 1;
        }
        let sigma2 = cfg.noise_sd * cfg.noise_sd;
        Ok(MomentCheck {
            predicted: [slope * slope * m2 + sigma2, slope.powi(3) * m3],
            empirical: [e2, e3],
            standard_error: [se2, se3],
            bin_edges: (0..bins).map(|i| lo + width * i as f64).collect(),
            counts,
        })
    };
    to_json(&run().map_err(|e| e.to_string())?)
}

#[derive(Serialize)]
struct ImpossibilityView {
    x2_grid: Vec<f64>,
    gamma: [f64; 2],
    phi: Vec<BinaryTable>,
    perturbed: Vec<BinaryTable>,
    residuals: [f64; 4],
    distance: f64,
}

/// One random binary instance and its perturbation by `c000`: two different
/// mechanisms with identical source regressions.
pub fn impossibility_json(seed: u64, c000: f64) -> Result<String, String> {
    if !(c000.is_finite() && c000 > 0.0) {
        return Err(format!("c000 must be positive, got {c000}"));
    }
    let grid = default_x2_grid();
    let instance = BinaryOovInstance::random(grid.clone(), &mut seeded_rng(seed));
    let p = perturb_binary(&instance, &vec![c000; grid.len()]).map_err(|e| e.to_string())?;
    to_json(&ImpossibilityView {
        residuals: consistency_residuals(&instance, &p.phi),
        distance: table_distance(&instance.phi, &p.phi),
        gamma: [instance.gamma1, instance.gamma3],
        x2_grid: grid,
        phi: instance.phi,
        perturbed: p.phi,
    })
}

#[wasm_bindgen]
pub fn transfer_contours(alpha: Vec<f64>, rows: usize, seed: u64, resolution: usize) -> Result<String, JsError> {
    transfer_contours_json(&alpha, rows, seed, resolution).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn moment_identity(slope: f64, draws: usize, seed: u64) -> Result<String, JsError> {
    moment_identity_json(slope, draws, seed).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn impossibility(seed: u64, c000: f64) -> Result<String, JsError> {
    impossibility_json(seed, c000).map_err(|e| JsError::new(&e))
}
