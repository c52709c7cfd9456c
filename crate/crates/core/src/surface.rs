//! Evaluation traits shared by learned models, closed-form oracles and closures.

use ndarray::Array2;

use crate::regressor::FeedforwardRegressor;
use crate::scm::PolyPredictor;

/// A function of two reals, e.g. `f_S(x1, x2)` or `hθ(x1, x2)`.
pub trait Surface {
    fn eval(&self, a: f64, b: f64) -> f64;

    /// `[f(a_i, b) for a_i in a]`, batched where the implementation allows.
    fn eval_column(&self, a: &[f64], b: f64) -> Vec<f64> {
        a.iter().map(|&ai| self.eval(ai, b)).collect()
    }

    fn eval_pairs(&self, a: &[f64], b: &[f64]) -> Vec<f64> {
        a.iter().zip(b).map(|(&ai, &bi)| self.eval(ai, bi)).collect()
    }
}

/// A function of one real, e.g. a univariate source model `f_S(x1)`.
pub trait Curve {
    fn eval(&self, x: f64) -> f64;

    fn eval_many(&self, xs: &[f64]) -> Vec<f64> {
        xs.iter().map(|&x| self.eval(x)).collect()
    }
}

/// A predictor over the target covariates `(x2, x3)`.
pub trait TargetPredictor {
    fn predict_target(&self, x2: f64, x3: f64) -> f64;

    /// Values on the Cartesian grid; row `i` is `x2s[i]`, column `j` is `x3s[j]`.
    fn predict_grid(&self, x2s: &[f64], x3s: &[f64]) -> Array2<f64> {
        Array2::from_shape_fn((x2s.len(), x3s.len()), |(i, j)| self.predict_target(x2s[i], x3s[j]))
    }
}

/// Wraps a closure as a [`Surface`], [`Curve`] or [`TargetPredictor`].
#[derive(Clone, Copy, Debug)]
pub struct FnModel<F>(pub F);

impl<F: Fn(f64, f64) -> f64> Surface for FnModel<F> {
    fn eval(&self, a: f64, b: f64) -> f64 {
        (self.0)(a, b)
    }
}

impl<F: Fn(f64, f64) -> f64> TargetPredictor for FnModel<F> {
    fn predict_target(&self, x2: f64, x3: f64) -> f64 {
        (self.0)(x2, x3)
    }
}

/// Closure wrapper for one-argument functions.
#[derive(Clone, Copy, Debug)]
pub struct FnCurve<F>(pub F);

impl<F: Fn(f64) -> f64> Curve for FnCurve<F> {
    fn eval(&self, x: f64) -> f64 {
        (self.0)(x)
    }
}

impl Surface for PolyPredictor {
    fn eval(&self, a: f64, b: f64) -> f64 {
        PolyPredictor::eval(self, a, b)
    }
}

impl TargetPredictor for PolyPredictor {
    fn predict_target(&self, x2: f64, x3: f64) -> f64 {
        PolyPredictor::eval(self, x2, x3)
    }
}

impl Surface for FeedforwardRegressor {
    fn eval(&self, a: f64, b: f64) -> f64 {
        self.predict_one(&[a, b])
    }

    fn eval_column(&self, a: &[f64], b: f64) -> Vec<f64> {
        let x = Array2::from_shape_fn((a.len(), 2), |(i, j)| if j == 0 { a[i] } else { b });
        self.predict(&x).expect("bivariate model")
    }

    fn eval_pairs(&self, a: &[f64], b: &[f64]) -> Vec<f64> {
        let x = Array2::from_shape_fn((a.len(), 2), |(i, j)| if j == 0 { a[i] } else { b[i] });
        self.predict(&x).expect("bivariate model")
    }
}

impl Curve for FeedforwardRegressor {
    fn eval(&self, x: f64) -> f64 {
        self.predict_one(&[x])
    }

    fn eval_many(&self, xs: &[f64]) -> Vec<f64> {
        let x = Array2::from_shape_fn((xs.len(), 1), |(i, _)| xs[i]);
        self.predict(&x).expect("univariate model")
    }
}

impl<T: Surface + ?Sized> Surface for &T {
    fn eval(&self, a: f64, b: f64) -> f64 {
        (**self).eval(a, b)
    }

    fn eval_column(&self, a: &[f64], b: f64) -> Vec<f64> {
        (**self).eval_column(a, b)
    }

    fn eval_pairs(&self, a: &[f64], b: &[f64]) -> Vec<f64> {
        (**self).eval_pairs(a, b)
    }
}

impl<T: TargetPredictor + ?Sized> TargetPredictor for &T {
    fn predict_target(&self, x2: f64, x3: f64) -> f64 {
        (**self).predict_target(x2, x3)
    }

    fn predict_grid(&self, x2s: &[f64], x3s: &[f64]) -> Array2<f64> {
        (**self).predict_grid(x2s, x3s)
    }
}

impl<T: TargetPredictor + ?Sized> TargetPredictor for Box<T> {
    fn predict_target(&self, x2: f64, x3: f64) -> f64 {
        (**self).predict_target(x2, x3)
    }

    fn predict_grid(&self, x2s: &[f64], x3s: &[f64]) -> Array2<f64> {
        (**self).predict_grid(x2s, x3s)
    }
}

/// `n` evenly spaced points from `lo` to `hi` inclusive.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect(),
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}
