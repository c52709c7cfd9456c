//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.

use std::process::ExitCode;
use std::time::Instant;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use oov::harness::{demo_composition, run_benchmark, CompositionConfig, ExperimentConfig};
use oov::moments::{central_moments, MomentSummary};
use oov::regressor::{gradient_check, train, FeedforwardRegressor, LossSpec, TrainConfig};
use oov::scm::{
    analytic_target_predictor, resample_joint, sample_joint, sample_joint_with, seeded_rng,
    FunctionClass, GeneratingFunction, ScmConfig, StandardizationTransform,
};
use oov::surface::{linspace, mean, FnModel, Surface, TargetPredictor};
use oov::theory::{check_marginal_consistency, default_x2_grid, demo_impossibility};
use oov::transfer::{
    build_predictor, fit_parametric_poly, fit_second_order, fit_skew_derivative, fit_source_poly,
    recover_target_coefficients, second_order_residual_moments, DerivativeModel, ZeroShotPredictor,
};

const SIGMA: f64 = 0.1;

/// `(passed, detail)`; an error counts as a failure.
type Outcome = oov::Result<(bool, String)>;

fn fast() -> TrainConfig {
    TrainConfig::default().with_epochs(40).with_learning_rate(3e-3)
}

fn quantile(v: &[f64], q: f64) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s[(q * (s.len() - 1) as f64).round() as usize]
}

fn mean_and_se(v: &[f64]) -> (f64, f64) {
    let m = mean(v);
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
    (m, (var / v.len() as f64).sqrt())
}

/// Unit-coefficient polynomial mechanism (linear in `x3`).
fn unit_polynomial() -> GeneratingFunction {
    GeneratingFunction::polynomial([1.0; 7])
}

/// Standardized population summary of `X3` up to order 6.
fn population_x3(transform: &StandardizationTransform, cfg: &ScmConfig) -> oov::Result<MomentSummary> {
    let central = (2..=6).map(|k| transform.central_moment_of(2, &cfg.covariates, k)).collect::<oov::Result<Vec<_>>>()?;
    Ok(MomentSummary::from_population(usize::MAX, transform.mean_of(2, &cfg.covariates), &central))
}

/// Draws `n` standardized `X3` values and as many noise terms.
fn conditional_draws(transform: &StandardizationTransform, n: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = seeded_rng(seed);
    let gamma = Gamma::new(1.0, 1.0).expect("unit gamma");
    (0..n)
        .map(|_| (transform.apply(2, gamma.sample(&mut rng)), SIGMA * rng.sample::<f64, _>(StandardNormal)))
        .unzip()
}

fn moment_identity() -> Outcome {
    let cfg = ScmConfig::default().with_seed(101);
    let (_, transform) = sample_joint_with(&cfg, 100_000, |a, b, c| a + b + c)?;
    let pop = population_x3(&transform, &cfg)?;
    let (mu3, m2, m3) = (pop.mean, pop.variance(), pop.skew());
    let d = |x1: f64, x2: f64| 0.5 + x1 - 0.7 * x2 + 0.3 * x1 * x2;
    let mut worst: f64 = 0.0;
    for (k, &(x1, x2)) in [(0.1, 0.2), (0.5, 0.5), (1.0, 0.3), (0.2, 1.5), (2.0, 2.0), (0.0, 0.0), (3.0, 0.5), (0.7, 2.5), (1.5, 1.5), (4.0, 4.0)]
        .iter()
        .enumerate()
    {
        let (x3, eps) = conditional_draws(&transform, 1_000_000, 200 + k as u64);
        // φ = g(x1, x2) + d(x1, x2)·x3, so Y − f_S = d·(x3 − μ3) + ε.
        let r: Vec<f64> = x3.iter().zip(&eps).map(|(x, e)| d(x1, x2) * (x - mu3) + e).collect();
        let (e2, se2) = mean_and_se(&r.iter().map(|v| v * v).collect::<Vec<_>>());
        let (e3, se3) = mean_and_se(&r.iter().map(|v| v * v * v).collect::<Vec<_>>());
        let dd = d(x1, x2);
        worst = worst.max(((e2 - (dd * dd * m2 + SIGMA * SIGMA)) / se2).abs());
        worst = worst.max(((e3 - dd.powi(3) * m3) / se3).abs());
    }
    Ok((worst < 3.0, format!("worst |z| = {worst:.2} over 10 points, 1e6 draws")))
}

fn parametric_recovery() -> Outcome {
    let cfg = ScmConfig::default().with_seed(0);
    let func = unit_polynomial();
    let (joint, transform) = sample_joint(&cfg, &func, 100_000)?;
    let source = joint.project(&["X1", "X2"], true)?;
    let x3 = central_moments(&joint.column("X3")?.to_vec(), 6)?;
    let f_s = fit_source_poly(&source)?;
    let theta = fit_parametric_poly(&source, &f_s, &x3)?;
    let theta_err = theta.iter().map(|t| (t - 1.0).abs()).fold(0.0, f64::max);
    let mu1 = mean(&source.column("X1")?.to_vec());
    let recovered = recover_target_coefficients(&theta, &f_s, mu1, x3.mean);
    let truth = analytic_target_predictor(&func, transform.mean_of(0, &cfg.covariates))?;
    let coef_err = [
        recovered.c0 - truth.c0,
        recovered.c1 - truth.c1,
        recovered.c2 - truth.c2,
        recovered.c3 - truth.c3,
    ]
    .iter()
    .map(|v| v.abs())
    .fold(0.0, f64::max);
    Ok((
        theta_err < 0.05 && coef_err < 0.1,
        format!("theta = {theta:.3?}, max |theta - 1| = {theta_err:.3}, max target coefficient error = {coef_err:.3}"),
    ))
}

/// Learned pipeline on the unit polynomial: source, slope, pool and the
/// target `X3` sample the slope model's moments came from.
struct LearnedCell {
    predictor: ZeroShotPredictor,
    target_x3: Vec<f64>,
    grid_mse: f64,
}

fn learned_cell() -> oov::Result<LearnedCell> {
    let cfg = ScmConfig::default().with_seed(0);
    let func = unit_polynomial();
    let (joint, transform) = sample_joint(&cfg, &func, 100_000)?;
    let source = joint.project(&["X1", "X2"], true)?;
    let target = resample_joint(&cfg.clone().with_seed(1), &transform, &func, 50)?;
    let target_x3 = target.column("X3")?.to_vec();
    let x3 = central_moments(&target_x3, 6)?;
    let x = source.select(&["X1", "X2"])?;
    let f_s = train(&x, source.require_target()?, LossSpec::MeanSquared, &fast().with_seed(10))?;
    let dm = fit_skew_derivative(&source, &f_s, &x3, &fast().with_seed(11))?;
    let predictor = build_predictor(f_s, dm, &source, 1000, 12)?;
    let truth = analytic_target_predictor(&func, transform.mean_of(0, &cfg.covariates))?;
    let axis = |v: Vec<f64>| linspace(quantile(&v, 0.05), quantile(&v, 0.95), 50);
    let (g2, g3) = (axis(joint.column("X2")?.to_vec()), axis(joint.column("X3")?.to_vec()));
    let diff = predictor.predict_grid(&g2, &g3) - truth.predict_grid(&g2, &g3);
    let grid_mse = diff.mapv(|v| v * v).mean().expect("grid");
    Ok(LearnedCell { predictor, target_x3, grid_mse })
}

fn zero_shot_exactness(learned: &LearnedCell) -> Outcome {
    let cfg = ScmConfig::default().with_seed(0);
    let func = unit_polynomial();
    let (joint, transform) = sample_joint(&cfg, &func, 100_000)?;
    let source = joint.project(&["X1", "X2"], true)?;
    let (mu1, mu3) = (transform.mean_of(0, &cfg.covariates), transform.mean_of(2, &cfg.covariates));
    let pop = population_x3(&transform, &cfg)?;
    let f_s = FnModel(move |a: f64, b: f64| a + b + a * b + (1.0 + a + b + a * b) * mu3);
    let slope = FnModel(|a: f64, b: f64| 1.0 + a + b + a * b);
    let dm = DerivativeModel::first_order(slope, mu3, pop.skew(), pop.variance());
    let oracle = build_predictor(f_s, dm, &source, 1000, 22)?;
    let truth = analytic_target_predictor(&func, mu1)?;
    let grid = linspace(0.0, 5.0, 50);
    let mut worst: f64 = 0.0;
    for &x2 in &grid {
        for &x3 in &grid {
            let z = (oracle.predict_target(x2, x3) - truth.predict_target(x2, x3)) / oracle.pool_standard_error(x2, x3);
            worst = worst.max(z.abs());
        }
    }
    let limit = 10.0 * SIGMA * SIGMA;
    Ok((
        worst < 3.0 && learned.grid_mse < limit,
        format!("oracle worst |z| = {worst:.2} on 50x50; learned central-grid MSE = {:.4} (limit {limit})", learned.grid_mse),
    ))
}

fn benchmark_ordering() -> Outcome {
    let start = Instant::now();
    let cfg = ExperimentConfig { budgets: Vec::new(), reference_draws: 100_000, ..ExperimentConfig::default() };
    let report = run_benchmark(&cfg)?;
    let med = |class, method| report.median_loss(class, method).unwrap_or(f64::NAN);
    let mut ok = true;
    let mut parts = Vec::new();
    for class in FunctionClass::ALL {
        let (p, o, m, f) = (med(class, "Proposed"), med(class, "Optimal"), med(class, "Marginal"), med(class, "FineTune"));
        ok &= p < m;
        if class == FunctionClass::Polynomial {
            ok &= o <= p && p < m.min(f);
        }
        parts.push(format!("{}: O {o:.3} P {p:.3} M {m:.3} F {f:.3}", class.name()));
    }
    let secs = start.elapsed().as_secs_f64();
    ok &= secs < 1800.0;
    Ok((ok, format!("{} in {secs:.0}s", parts.join("; "))))
}

fn marginal_consistency(learned: &LearnedCell) -> Outcome {
    let p = &learned.predictor;
    let gap = check_marginal_consistency(&p.source, p, &p.pool, &learned.target_x3, &linspace(0.0, 5.0, 50))?;
    Ok((gap < 1e-9, format!("max discrepancy {gap:.2e} over 50 x2 points")))
}

fn impossibility() -> Outcome {
    let start = Instant::now();
    let report = demo_impossibility(100, &default_x2_grid(), 0)?;
    let secs = start.elapsed().as_secs_f64();
    Ok((
        report.max_residual < 1e-10 && report.min_distance > 0.1 && secs < 10.0,
        format!("max residual {:.2e}, min distance {:.3}, {secs:.2}s", report.max_residual, report.min_distance),
    ))
}

fn second_order() -> Outcome {
    // φ = x1 + x2 + x3² + x1·x3 + x2·x3: f′(μ3) = 2μ3 + x1 + x2 and f″/2 = 1.
    let phi = |a: f64, b: f64, c: f64| a + b + c * c + a * c + b * c;
    let cfg = ScmConfig::default().with_seed(0);
    let (joint, transform) = sample_joint_with(&cfg, 300_000, phi)?;
    let pop = population_x3(&transform, &cfg)?;
    let mu3 = pop.mean;

    let mut worst: f64 = 0.0;
    for (k, &(x1, x2)) in [(0.1, 0.1), (0.5, 1.0), (1.5, 0.3), (2.0, 2.0), (0.3, 3.0)].iter().enumerate() {
        let (x3, eps) = conditional_draws(&transform, 1_000_000, 300 + k as u64);
        let f_s = x1 + x2 + mu3 * mu3 + pop.variance() + (x1 + x2) * mu3;
        let r: Vec<f64> = x3.iter().zip(&eps).map(|(&c, e)| phi(x1, x2, c) - f_s + e).collect();
        let (e2, se2) = mean_and_se(&r.iter().map(|v| v * v).collect::<Vec<_>>());
        let (e3, se3) = mean_and_se(&r.iter().map(|v| v * v * v).collect::<Vec<_>>());
        let (p2, p3) = second_order_residual_moments(2.0 * mu3 + x1 + x2, 1.0, &pop, SIGMA)?;
        worst = worst.max(((e2 - p2) / se2).abs()).max(((e3 - p3) / se3).abs());
    }

    let x3 = central_moments(&joint.column("X3")?.to_vec(), 6)?;
    let source = joint.project(&["X1", "X2"], true)?;
    let x = source.select(&["X1", "X2"])?;
    let f_s = train(&x, source.require_target()?, LossSpec::MeanSquared, &fast().with_seed(30))?;
    let fit = fit_second_order(&source, &f_s, &x3, SIGMA, &fast().with_seed(31))?;
    let curvature = fit.curvature.as_ref().expect("second-order fit has curvature");
    let a = source.column("X1")?.to_vec();
    let b = source.column("X2")?.to_vec();
    let (ax, bx) = (linspace(quantile(&a, 0.05), quantile(&a, 0.95), 20), linspace(quantile(&b, 0.05), quantile(&b, 0.95), 20));
    let (mut slope_err, mut curv_err) = (Vec::new(), Vec::new());
    for &u in &ax {
        for &v in &bx {
            let s = 2.0 * mu3 + u + v;
            slope_err.push(((Surface::eval(&fit.slope, u, v) - s) / s).abs());
            curv_err.push((Surface::eval(curvature, u, v) - 1.0).abs());
        }
    }
    let (se, ce) = (mean(&slope_err), mean(&curv_err));
    Ok((
        worst < 3.0 && se < 0.15 && ce < 0.15,
        format!("forward worst |z| = {worst:.2}; mean relative error slope {se:.3}, curvature {ce:.3}"),
    ))
}

fn composition() -> Outcome {
    let report = demo_composition(&CompositionConfig::default())?;
    let at = |sd: f64| report.medians.iter().find(|(s, _)| *s == sd).map(|&(_, m)| m).unwrap_or(f64::NAN);
    let (small, large) = (at(0.01), at(1.0));
    Ok((small < 1e-2 && small < large, format!("median MSE {small:.2e} at sd 0.01, {large:.2e} at sd 1")))
}

fn gradient_checks() -> Outcome {
    let mut worst: f64 = 0.0;
    for seed in 0..20u64 {
        let mut rng = seeded_rng(500 + seed);
        let mut model = FeedforwardRegressor::new(&[2, 5, 4, 1], 1.0, &mut rng)?;
        randomize_parameters(&mut model, &mut rng)?;
        let x = Array2::from_shape_fn((8, 2), |_| rng.random_range(-1.0..2.0));
        let k3 = rng.random_range(0.2..1.5);
        for loss in [LossSpec::MeanSquared, LossSpec::CubedResidual { k3 }] {
            let y: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
            worst = worst.max(gradient_check(&model, loss, &x, &y)?.max_relative_error);
        }
    }
    Ok((worst < 1e-4, format!("worst relative error {worst:.2e} over 20 instances x 2 losses")))
}

/// Random weights, biases, input normalization and output affine. Non-zero
/// biases keep ReLU pre-activations off the kink at exactly zero.
fn randomize_parameters(model: &mut FeedforwardRegressor, rng: &mut impl Rng) -> oov::Result<()> {
    let widths = model.widths().to_vec();
    for (layer, pair) in widths.windows(2).enumerate() {
        let weights: Vec<f64> = (0..pair[0] * pair[1]).map(|_| rng.random_range(-1.0..1.0)).collect();
        let bias: Vec<f64> = (0..pair[1]).map(|_| rng.random_range(-0.5..0.5)).collect();
        model.set_layer(layer, &weights, &bias)?;
    }
    let offset = vec![rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)];
    let scale = vec![rng.random_range(0.5..2.0), rng.random_range(0.5..2.0)];
    model.set_input_normalization(offset, scale)?;
    model.set_output_affine(rng.random_range(-0.5..0.5), rng.random_range(0.5..2.0));
    Ok(())
}

fn report(id: usize, name: &str, outcome: Outcome, secs: f64) -> bool {
    let (ok, detail) = outcome.unwrap_or_else(|e| (false, format!("error: {e}")));
    println!("{} [{id}] {name}: {detail} ({secs:.1}s)", if ok { "PASS" } else { "FAIL" });
    ok
}

/// Runs every criterion, or only those whose numbers are passed as arguments
/// (`cargo test --test acceptance -- 4 7`).
fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    // `cargo test -- --list` and similar harness probes have nothing to enumerate.
    if args.iter().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let selected: Vec<usize> = args.iter().filter_map(|a| a.parse().ok()).collect();
    let wanted = |id: usize| selected.is_empty() || selected.contains(&id);
    let mut all = true;
    let mut run = |id: usize, name: &str, f: &dyn Fn() -> Outcome| {
        if wanted(id) {
            let t = Instant::now();
            let out = f();
            all &= report(id, name, out, t.elapsed().as_secs_f64());
        }
    };

    run(1, "moment identity", &|| {
        let t = Instant::now();
        let (ok, detail) = moment_identity()?;
        Ok((ok && t.elapsed().as_secs_f64() < 60.0, detail))
    });
    run(2, "polynomial exact recovery", &parametric_recovery);
    if wanted(3) || wanted(5) {
        let learned = learned_cell().map_err(|e| e.to_string());
        let with_cell = |f: fn(&LearnedCell) -> Outcome| match &learned {
            Ok(cell) => f(cell),
            Err(e) => Ok((false, format!("learned pipeline failed: {e}"))),
        };
        run(3, "zero-shot exactness", &|| with_cell(zero_shot_exactness));
        run(5, "marginal consistency", &|| with_cell(marginal_consistency));
    }
    run(6, "impossibility construction", &impossibility);
    run(9, "gradient checks", &gradient_checks);
    run(8, "possibility composition", &composition);
    run(7, "second-order extension", &second_order);
    run(4, "benchmark ordering", &benchmark_ordering);

    if all { ExitCode::SUCCESS } else { ExitCode::FAILURE }
}
