//! Plug-in central moments, residual powers and Gaussian noise moments.

use serde::{Deserialize, Serialize};

use crate::error::{OovError, Result};

/// Neumaier-compensated running sum.
#[derive(Clone, Copy, Default)]
struct CompensatedSum {
    sum: f64,
    comp: f64,
}

impl CompensatedSum {
    fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    fn value(self) -> f64 {
        self.sum + self.comp
    }
}

/// Sample mean and biased central moments `m_k = (1/n) Σ (x_i − μ)^k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentSummary {
    pub count: usize,
    pub mean: f64,
    /// `central[k]` holds `m_k`; index 0 and 1 are 1 and 0.
    pub central: Vec<f64>,
}

impl MomentSummary {
    pub fn max_order(&self) -> usize {
        self.central.len() - 1
    }

    pub fn get(&self, k: usize) -> Option<f64> {
        self.central.get(k).copied()
    }

    /// `m_k`, erroring when the summary was computed to a lower order.
    pub fn order(&self, k: usize) -> Result<f64> {
        self.get(k).ok_or(OovError::UnsupportedOrder(k))
    }

    pub fn variance(&self) -> f64 {
        self.central[2]
    }

    /// Third central moment (the "skew" `k3`).
    pub fn skew(&self) -> f64 {
        self.central.get(3).copied().unwrap_or(0.0)
    }

    pub fn mean_standard_error(&self) -> f64 {
        (self.variance() / self.count as f64).sqrt()
    }

    /// Delta-method standard error of `m3`: `sqrt((m6 − m3² − 6 m2 m4 + 9 m2³) / n)`.
    pub fn skew_standard_error(&self) -> Option<f64> {
        let (m2, m3, m4, m6) = (self.get(2)?, self.get(3)?, self.get(4)?, self.get(6)?);
        let var = (m6 - m3 * m3 - 6.0 * m2 * m4 + 9.0 * m2.powi(3)).max(0.0);
        Some((var / self.count as f64).sqrt())
    }

    /// Summary of a population with known moments (used for oracle injection).
    pub fn from_population(count: usize, mean: f64, central: &[f64]) -> Self {
        let mut c = vec![1.0, 0.0];
        c.extend_from_slice(central);
        Self { count, mean, central: c }
    }
}

pub fn central_moments(samples: &[f64], max_order: usize) -> Result<MomentSummary> {
    if !(2..=6).contains(&max_order) {
        return Err(OovError::UnsupportedOrder(max_order));
    }
    if samples.len() < 2 {
        return Err(OovError::InsufficientSamples { needed: 2, got: samples.len() });
    }
    if samples.iter().any(|x| !x.is_finite()) {
        return Err(OovError::NonFinite("moment samples".into()));
    }
    let n = samples.len() as f64;
    let mut total = CompensatedSum::default();
    samples.iter().for_each(|&x| total.add(x));
    let mut mean = total.value() / n;
    // One refinement pass removes the residual rounding in the mean.
    let mut drift = CompensatedSum::default();
    samples.iter().for_each(|&x| drift.add(x - mean));
    mean += drift.value() / n;

    let mut sums = vec![CompensatedSum::default(); max_order + 1];
    for &x in samples {
        let d = x - mean;
        let mut p = d;
        for s in sums.iter_mut().skip(2) {
            p *= d;
            s.add(p);
        }
    }
    let mut central = vec![1.0, 0.0];
    central.extend(sums.iter().skip(2).map(|s| s.value() / n));
    Ok(MomentSummary { count: samples.len(), mean, central })
}

pub fn residual_powers(targets: &[f64], predictions: &[f64], n: u32) -> Result<Vec<f64>> {
    if !(2..=3).contains(&n) {
        return Err(OovError::UnsupportedOrder(n as usize));
    }
    if targets.len() != predictions.len() {
        return Err(OovError::LengthMismatch { left: targets.len(), right: predictions.len() });
    }
    Ok(targets.iter().zip(predictions).map(|(y, p)| (y - p).powi(n as i32)).collect())
}

/// `E[ε^k]` for `ε ~ N(0, σ²)`, `k ≤ 6`.
pub fn gaussian_noise_moment(sigma: f64, k: usize) -> Result<f64> {
    if !(sigma >= 0.0) {
        return Err(OovError::InvalidConfig(format!("noise sd must be non-negative, got {sigma}")));
    }
    let s2 = sigma * sigma;
    Ok(match k {
        0 => 1.0,
        1 | 3 | 5 => 0.0,
        2 => s2,
        4 => 3.0 * s2 * s2,
        6 => 15.0 * s2 * s2 * s2,
        other => return Err(OovError::UnsupportedOrder(other)),
    })
}
