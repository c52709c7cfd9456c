//! The binary non-identifiability construction and marginal-consistency checks.
//!
//! With binary `X1`, `X3` and two sources observing `(X1, X2, Y)` and
//! `(X2, X3, Y)`, any mechanism φ must satisfy, at every `x2`,
//!
//! ```text
//! f_A(0, x2) = γ3 φ(0,x2,0) + (1−γ3) φ(0,x2,1)
//! f_A(1, x2) = γ3 φ(1,x2,0) + (1−γ3) φ(1,x2,1)
//! f_B(x2, 0) = γ1 φ(0,x2,0) + (1−γ1) φ(1,x2,0)
//! f_B(x2, 1) = γ1 φ(0,x2,1) + (1−γ1) φ(1,x2,1)
//! ```
//!
//! with `γi = P(Xi = 0)`. Rescaling φ(0,x2,0) by an arbitrary factor and
//! solving for the other three factors yields a different φ′ with the same
//! observable regressions.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{OovError, Result};
use crate::scm::seeded_rng;
use crate::surface::{linspace, mean, Surface, TargetPredictor};

/// `table[x1][x3]` at one `x2` grid point.
pub type BinaryTable = [[f64; 2]; 2];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinaryOovInstance {
    /// `P(X1 = 0)`
    pub gamma1: f64,
    /// `P(X3 = 0)`
    pub gamma3: f64,
    pub x2_grid: Vec<f64>,
    /// φ at each grid point.
    pub phi: Vec<BinaryTable>,
    /// `f_A(x1, x2)`, indexed `[grid][x1]`.
    pub f_a: Vec<[f64; 2]>,
    /// `f_B(x2, x3)`, indexed `[grid][x3]`.
    pub f_b: Vec<[f64; 2]>,
}

fn induced(gamma1: f64, gamma3: f64, t: &BinaryTable) -> ([f64; 2], [f64; 2]) {
    let f_a = [
        gamma3 * t[0][0] + (1.0 - gamma3) * t[0][1],
        gamma3 * t[1][0] + (1.0 - gamma3) * t[1][1],
    ];
    let f_b = [
        gamma1 * t[0][0] + (1.0 - gamma1) * t[1][0],
        gamma1 * t[0][1] + (1.0 - gamma1) * t[1][1],
    ];
    (f_a, f_b)
}

impl BinaryOovInstance {
    pub fn new(gamma1: f64, gamma3: f64, x2_grid: Vec<f64>, phi: Vec<BinaryTable>) -> Result<Self> {
        for (name, g) in [("gamma1", gamma1), ("gamma3", gamma3)] {
            if !(g > 0.0 && g < 1.0) {
                return Err(OovError::InvalidConfig(format!("{name} must lie in (0, 1), got {g}")));
            }
        }
        if x2_grid.is_empty() {
            return Err(OovError::Empty("x2 grid"));
        }
        if phi.len() != x2_grid.len() {
            return Err(OovError::LengthMismatch { left: x2_grid.len(), right: phi.len() });
        }
        if phi.iter().flatten().flatten().any(|v| !v.is_finite()) {
            return Err(OovError::NonFinite("binary table".into()));
        }
        let (f_a, f_b) = phi.iter().map(|t| induced(gamma1, gamma3, t)).unzip();
        Ok(Self { gamma1, gamma3, x2_grid, phi, f_a, f_b })
    }

    /// Random instance with `γ` uniform in `[0.1, 0.9]` and table entries uniform in `[0.5, 2]`.
    pub fn random<R: Rng + ?Sized>(x2_grid: Vec<f64>, rng: &mut R) -> Self {
        let gamma1 = rng.random_range(0.1..0.9);
        let gamma3 = rng.random_range(0.1..0.9);
        let phi = x2_grid
            .iter()
            .map(|_| [[rng.random_range(0.5..2.0), rng.random_range(0.5..2.0)], [rng.random_range(0.5..2.0), rng.random_range(0.5..2.0)]])
            .collect();
        Self::new(gamma1, gamma3, x2_grid, phi).expect("valid random instance")
    }
}

/// Default `x2` grid: 21 points on `[0, 5]`.
pub fn default_x2_grid() -> Vec<f64> {
    linspace(0.0, 5.0, 21)
}

/// A perturbed mechanism `φ′ = c ⊙ φ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Perturbation {
    /// Multiplicative factors `c[grid][x1][x3]`.
    pub factors: Vec<BinaryTable>,
    pub phi: Vec<BinaryTable>,
}

/// Perturbs φ(0, x2, 0) by `c000[g]` and solves the remaining three factors
/// so that φ′ induces the same `f_A` and `f_B`.
pub fn perturb_binary(instance: &BinaryOovInstance, c000: &[f64]) -> Result<Perturbation> {
    if c000.len() != instance.x2_grid.len() {
        return Err(OovError::LengthMismatch { left: instance.x2_grid.len(), right: c000.len() });
    }
    let (g1, g3) = (instance.gamma1, instance.gamma3);
    let mut factors = Vec::with_capacity(c000.len());
    let mut phi = Vec::with_capacity(c000.len());
    for (g, &c) in c000.iter().enumerate() {
        let t = &instance.phi[g];
        let (fa, fb) = (instance.f_a[g], instance.f_b[g]);
        for (label, v) in [("phi(0,x2,1)", t[0][1]), ("phi(1,x2,1)", t[1][1]), ("phi(1,x2,0)", t[1][0])] {
            if v == 0.0 {
                return Err(OovError::ZeroDivisor(format!("{label} = 0 at x2 = {}", instance.x2_grid[g])));
            }
        }
        let base = c * t[0][0];
        let c001 = (fa[0] - g3 * base) / ((1.0 - g3) * t[0][1]);
        let c111 = (fb[1] - (g1 * fa[0] - g1 * g3 * base) / (1.0 - g3)) / ((1.0 - g1) * t[1][1]);
        let c110 = (fa[1] - ((1.0 - g3) * fb[1] - g1 * fa[0] + g1 * g3 * base) / (1.0 - g1)) / (g3 * t[1][0]);
        let f = [[c, c001], [c110, c111]];
        factors.push(f);
        phi.push([[f[0][0] * t[0][0], f[0][1] * t[0][1]], [f[1][0] * t[1][0], f[1][1] * t[1][1]]]);
    }
    Ok(Perturbation { factors, phi })
}

/// Maximum absolute residual of each of the four consistency equations for
/// a candidate mechanism against the instance's observed regressions.
pub fn consistency_residuals(instance: &BinaryOovInstance, phi: &[BinaryTable]) -> [f64; 4] {
    let mut worst = [0.0f64; 4];
    for (g, t) in phi.iter().enumerate() {
        let (fa, fb) = induced(instance.gamma1, instance.gamma3, t);
        let r = [fa[0] - instance.f_a[g][0], fa[1] - instance.f_a[g][1], fb[0] - instance.f_b[g][0], fb[1] - instance.f_b[g][1]];
        for (w, v) in worst.iter_mut().zip(r) {
            *w = w.max(v.abs());
        }
    }
    worst
}

/// Maximum residual of `(1−γ1) c(1,x2,0) φ(1,x2,0) = f_B(x2,0) − γ1 c(0,x2,0) φ(0,x2,0)`.
pub fn coherence_residual(instance: &BinaryOovInstance, perturbation: &Perturbation) -> f64 {
    let g1 = instance.gamma1;
    perturbation
        .phi
        .iter()
        .zip(&instance.f_b)
        .map(|(t, fb)| ((1.0 - g1) * t[1][0] - (fb[0] - g1 * t[0][0])).abs())
        .fold(0.0, f64::max)
}

/// Euclidean distance between two mechanisms over all table entries.
pub fn table_distance(a: &[BinaryTable], b: &[BinaryTable]) -> f64 {
    a.iter()
        .flatten()
        .flatten()
        .zip(b.iter().flatten().flatten())
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// `max over x2 of |mean_i f_source(x1_i, x2) − mean_j f_target(x2, x3_j)|`.
pub fn check_marginal_consistency<S: Surface, T: TargetPredictor>(
    f_source: &S,
    f_target: &T,
    x1_samples: &[f64],
    x3_samples: &[f64],
    x2_grid: &[f64],
) -> Result<f64> {
    if x1_samples.is_empty() || x3_samples.is_empty() || x2_grid.is_empty() {
        return Err(OovError::Empty("marginal-consistency samples"));
    }
    let target = f_target.predict_grid(x2_grid, x3_samples);
    Ok(x2_grid
        .iter()
        .enumerate()
        .map(|(i, &x2)| {
            let lhs = mean(&f_source.eval_column(x1_samples, x2));
            let rhs = target.row(i).mean().expect("non-empty row");
            (lhs - rhs).abs()
        })
        .fold(0.0, f64::max))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceReport {
    pub instance: BinaryOovInstance,
    pub c000: Vec<f64>,
    pub perturbation: Perturbation,
    /// Worst residual of each consistency equation for φ′.
    pub residuals: [f64; 4],
    pub coherence_residual: f64,
    pub distance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImpossibilityReport {
    pub seed: u64,
    pub max_residual: f64,
    pub max_coherence_residual: f64,
    pub min_distance: f64,
    pub instances: Vec<InstanceReport>,
}

/// Builds `count` random instances, perturbs each with `c000` uniform in
/// `[0.5, 2]`, and records the consistency residuals and the distance moved.
pub fn demo_impossibility(count: usize, x2_grid: &[f64], seed: u64) -> Result<ImpossibilityReport> {
    if count == 0 {
        return Err(OovError::InvalidConfig("instance count must be at least 1".into()));
    }
    let mut rng = seeded_rng(seed);
    let mut instances = Vec::with_capacity(count);
    for _ in 0..count {
        let instance = BinaryOovInstance::random(x2_grid.to_vec(), &mut rng);
        let c000: Vec<f64> = x2_grid.iter().map(|_| rng.random_range(0.5..2.0)).collect();
        let perturbation = perturb_binary(&instance, &c000)?;
        let residuals = consistency_residuals(&instance, &perturbation.phi);
        let coherence = coherence_residual(&instance, &perturbation);
        let distance = table_distance(&instance.phi, &perturbation.phi);
        instances.push(InstanceReport { instance, c000, perturbation, residuals, coherence_residual: coherence, distance });
    }
    Ok(ImpossibilityReport {
        seed,
        max_residual: instances.iter().flat_map(|r| r.residuals).fold(0.0, f64::max),
        max_coherence_residual: instances.iter().map(|r| r.coherence_residual).fold(0.0, f64::max),
        min_distance: instances.iter().map(|r| r.distance).fold(f64::INFINITY, f64::min),
        instances,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baselines::marginal_baseline;
    use crate::surface::FnModel;
    use crate::transfer::{DerivativeModel, ZeroShotPredictor};
    use proptest::prelude::*;

    fn instance(seed: u64) -> BinaryOovInstance {
        BinaryOovInstance::random(default_x2_grid(), &mut seeded_rng(seed))
    }

    #[test]
    fn identity_perturbation() {
        let inst = instance(1);
        let p = perturb_binary(&inst, &vec![1.0; 21]).unwrap();
        for (a, b) in p.phi.iter().flatten().flatten().zip(inst.phi.iter().flatten().flatten()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn doubling_moves_mechanism_but_stays_consistent() {
        let inst = instance(2);
        let p = perturb_binary(&inst, &vec![2.0; 21]).unwrap();
        assert!(consistency_residuals(&inst, &p.phi).iter().all(|&r| r < 1e-10));
        assert!(table_distance(&inst.phi, &p.phi) > 0.0);
    }

    #[test]
    fn zero_divisor_is_reported() {
        let mut inst = instance(3);
        inst.phi[4][1][1] = 0.0;
        let inst = BinaryOovInstance::new(inst.gamma1, inst.gamma3, inst.x2_grid, inst.phi).unwrap();
        assert!(matches!(perturb_binary(&inst, &vec![1.5; 21]), Err(OovError::ZeroDivisor(_))));
    }

    #[test]
    fn invalid_instances() {
        assert!(BinaryOovInstance::new(0.0, 0.5, vec![0.0], vec![[[1.0; 2]; 2]]).is_err());
        assert!(BinaryOovInstance::new(0.5, 1.0, vec![0.0], vec![[[1.0; 2]; 2]]).is_err());
        assert!(BinaryOovInstance::new(0.5, 0.5, vec![0.0, 1.0], vec![[[1.0; 2]; 2]]).is_err());
    }

    #[test]
    fn demo_report_round_trips() {
        let report = demo_impossibility(3, &default_x2_grid(), 7).unwrap();
        assert_eq!(report.instances.len(), 3);
        assert!(report.max_residual < 1e-10 && report.max_coherence_residual < 1e-10);
        let json = serde_json::to_string(&report).unwrap();
        assert_eq!(serde_json::from_str::<ImpossibilityReport>(&json).unwrap(), report);
    }

    #[test]
    fn zero_shot_is_marginally_consistent() {
        let x3: Vec<f64> = (0..40).map(|i| 0.1 * i as f64 + (i as f64).sin()).collect();
        let pool = vec![0.2, 0.7, 1.9];
        let fs = |a: f64, b: f64| a * b + a.exp() - b;
        let dm = DerivativeModel::first_order(FnModel(|a: f64, b: f64| a - 2.0 * b), mean(&x3), 0.3, 0.5);
        let zs = ZeroShotPredictor::new(FnModel(fs), dm, pool.clone()).unwrap();
        let grid = linspace(0.0, 5.0, 11);
        let d = check_marginal_consistency(&FnModel(fs), &zs, &pool, &x3, &grid).unwrap();
        assert!(d < 1e-9, "{d}");
    }

    #[test]
    fn planted_violation_is_detected() {
        let pool = vec![0.2, 0.7, 1.9];
        let fs = |a: f64, b: f64| a + b;
        let m = marginal_baseline(FnModel(fs), pool.clone()).unwrap();
        let shifted = FnModel(move |x2: f64, x3: f64| m.predict_target(x2, x3) + 1.0);
        let d = check_marginal_consistency(&FnModel(fs), &shifted, &pool, &[0.0, 1.0], &[0.0, 2.0]).unwrap();
        assert!((d - 1.0).abs() < 1e-12);
        assert!(check_marginal_consistency(&FnModel(fs), &shifted, &[], &[0.0], &[0.0]).is_err());
    }

    proptest! {
        #[test]
        fn perturbations_preserve_consistency(seed in 0u64..10_000, c in prop::collection::vec(0.1f64..5.0, 21)) {
            let inst = instance(seed);
            let p = perturb_binary(&inst, &c).unwrap();
            prop_assert!(consistency_residuals(&inst, &p.phi).iter().all(|&r| r < 1e-10));
            prop_assert!(coherence_residual(&inst, &p) < 1e-10);
        }
    }
}
