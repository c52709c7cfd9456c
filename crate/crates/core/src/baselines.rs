//! Comparison predictors over the target covariates `(x2, x3)`.

use serde::{Deserialize, Serialize};

use crate::error::{OovError, Result};
use crate::regressor::{train, FeedforwardRegressor, LossSpec, TrainConfig};
use crate::scm::EnvironmentDataset;
use crate::surface::{mean, Curve, Surface, TargetPredictor};

/// A target covariate that can be fed into a source input slot.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TargetCovariate {
    X2,
    X3,
}

impl TargetCovariate {
    fn parse(name: &str) -> Result<Self> {
        match name {
            "X2" => Ok(Self::X2),
            "X3" => Ok(Self::X3),
            other => Err(OovError::UnknownVariable(other.to_string())),
        }
    }

    fn pick(self, x2: f64, x3: f64) -> f64 {
        match self {
            Self::X2 => x2,
            Self::X3 => x3,
        }
    }
}

/// Which target covariate feeds each of the source model's `(X1, X2)` slots.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotMapping {
    pub x1_slot: TargetCovariate,
    pub x2_slot: TargetCovariate,
}

impl Default for SlotMapping {
    /// Non-shared into non-shared (`X3 → X1`), shared variable kept in place.
    fn default() -> Self {
        Self { x1_slot: TargetCovariate::X3, x2_slot: TargetCovariate::X2 }
    }
}

impl SlotMapping {
    /// Builds a mapping from `(source slot, target covariate)` pairs; both
    /// source slots must be assigned exactly once.
    pub fn from_pairs(pairs: &[(&str, &str)]) -> Result<Self> {
        let (mut x1, mut x2) = (None, None);
        for &(slot, var) in pairs {
            let target = TargetCovariate::parse(var)?;
            let entry = match slot {
                "X1" => &mut x1,
                "X2" => &mut x2,
                other => return Err(OovError::UnknownVariable(other.to_string())),
            };
            if entry.replace(target).is_some() {
                return Err(OovError::InvalidConfig(format!("slot {slot} assigned twice")));
            }
        }
        match (x1, x2) {
            (Some(x1_slot), Some(x2_slot)) => Ok(Self { x1_slot, x2_slot }),
            _ => Err(OovError::InvalidConfig("slot mapping must assign both X1 and X2".into())),
        }
    }
}

/// One univariate fit of the additive baseline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdditiveTerm {
    pub covariate: String,
    pub model: FeedforwardRegressor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "tag")]
pub enum BaselinePredictor<S = FeedforwardRegressor> {
    /// Regressor trained directly on target joint data.
    Optimal { model: S },
    /// `f_S` averaged over a frozen `X1` pool; ignores `x3`.
    Marginal { source: S, pool: Vec<f64> },
    /// `f_S` evaluated with target covariates substituted into its slots.
    FineTune { source: S, mapping: SlotMapping },
    /// Sum of the `X2` and `X3` univariate fits minus the double-counted mean.
    NaiveAdditive { terms: Vec<AdditiveTerm>, correction: f64 },
}

impl<S> BaselinePredictor<S> {
    pub fn tag(&self) -> &'static str {
        match self {
            Self::Optimal { .. } => "Optimal",
            Self::Marginal { .. } => "Marginal",
            Self::FineTune { .. } => "FineTune",
            Self::NaiveAdditive { .. } => "NaiveAdditive",
        }
    }
}

impl<S: Surface> BaselinePredictor<S> {
    fn marginal_at(source: &S, pool: &[f64], x2: f64) -> f64 {
        mean(&source.eval_column(pool, x2))
    }
}

impl<S: Surface> TargetPredictor for BaselinePredictor<S> {
    fn predict_target(&self, x2: f64, x3: f64) -> f64 {
        match self {
            Self::Optimal { model } => model.eval(x2, x3),
            Self::Marginal { source, pool } => Self::marginal_at(source, pool, x2),
            Self::FineTune { source, mapping } => source.eval(mapping.x1_slot.pick(x2, x3), mapping.x2_slot.pick(x2, x3)),
            Self::NaiveAdditive { terms, correction } => {
                terms
                    .iter()
                    .map(|t| {
                        let x = if t.covariate == "X2" { x2 } else { x3 };
                        Curve::eval(&t.model, x)
                    })
                    .sum::<f64>()
                    + correction
            }
        }
    }

    fn predict_grid(&self, x2s: &[f64], x3s: &[f64]) -> ndarray::Array2<f64> {
        match self {
            Self::Marginal { source, pool } => {
                let rows: Vec<f64> = x2s.iter().map(|&x2| Self::marginal_at(source, pool, x2)).collect();
                ndarray::Array2::from_shape_fn((x2s.len(), x3s.len()), |(i, _)| rows[i])
            }
            Self::Optimal { model } => {
                let (a, b): (Vec<f64>, Vec<f64>) =
                    x2s.iter().flat_map(|&x2| x3s.iter().map(move |&x3| (x2, x3))).unzip();
                ndarray::Array2::from_shape_vec((x2s.len(), x3s.len()), model.eval_pairs(&a, &b)).expect("grid shape")
            }
            _ => ndarray::Array2::from_shape_fn((x2s.len(), x3s.len()), |(i, j)| self.predict_target(x2s[i], x3s[j])),
        }
    }
}

pub fn marginal_baseline<S: Surface>(f_s: S, pool: Vec<f64>) -> Result<BaselinePredictor<S>> {
    if pool.is_empty() {
        return Err(OovError::Empty("Monte-Carlo pool"));
    }
    Ok(BaselinePredictor::Marginal { source: f_s, pool })
}

pub fn finetune_baseline<S: Surface>(f_s: S, mapping: SlotMapping) -> BaselinePredictor<S> {
    BaselinePredictor::FineTune { source: f_s, mapping }
}

/// Trains a fresh `(x2, x3) → Y` regressor on target joint data.
pub fn optimal_baseline(target_joint: &EnvironmentDataset, config: &TrainConfig) -> Result<BaselinePredictor> {
    let x = target_joint.select(&["X2", "X3"])?;
    let y = target_joint.require_target()?;
    if y.is_empty() {
        return Err(OovError::Empty("target joint sample"));
    }
    Ok(BaselinePredictor::Optimal { model: train(&x, y, LossSpec::MeanSquared, config)? })
}

/// Fits one univariate regressor per `(Xi, Y)` dataset and combines the `X2`
/// and `X3` fits additively.
pub fn naive_additive(datasets: &[EnvironmentDataset], config: &TrainConfig) -> Result<BaselinePredictor> {
    let mut terms = Vec::new();
    let mut target_means = Vec::new();
    for (i, data) in datasets.iter().enumerate() {
        if data.n_rows() == 0 {
            return Err(OovError::Empty("additive pair dataset"));
        }
        if data.names().len() != 1 {
            return Err(OovError::ShapeMismatch(format!(
                "additive pair dataset must hold one covariate, found {}",
                data.names().len()
            )));
        }
        let name = data.names()[0].clone();
        let y = data.require_target()?;
        target_means.push(mean(y));
        if name != "X2" && name != "X3" {
            continue;
        }
        let model = train(data.covariates(), y, LossSpec::MeanSquared, &config.clone().with_seed(config.seed + i as u64))?;
        terms.push(AdditiveTerm { covariate: name, model });
    }
    if terms.is_empty() {
        return Err(OovError::InvalidConfig("no X2 or X3 pair dataset supplied".into()));
    }
    let correction = -((terms.len() - 1) as f64) * mean(&target_means);
    Ok(BaselinePredictor::NaiveAdditive { terms, correction })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::regressor::FeedforwardRegressor;
    use crate::surface::FnModel;
    use crate::transfer::{DerivativeModel, ZeroShotPredictor};

    #[test]
    fn marginal_examples() {
        let c = marginal_baseline(FnModel(|_: f64, _: f64| 2.5), vec![0.1, 3.0]).unwrap();
        assert_eq!(c.predict_target(1.0, 4.0), 2.5);
        let pool = vec![0.5, 1.0, 2.5];
        let m = mean(&pool);
        let p = marginal_baseline(FnModel(|a: f64, b: f64| a + b), pool).unwrap();
        assert!((p.predict_target(0.7, 0.0) - (m + 0.7)).abs() < 1e-12);
        assert_eq!(p.predict_target(0.7, 0.0), p.predict_target(0.7, 4.9));
        let grid = p.predict_grid(&[0.0, 1.0], &[0.0, 2.0, 4.0]);
        assert!(grid.rows().into_iter().all(|r| r.iter().all(|&v| v == r[0])));
        assert!(marginal_baseline(FnModel(|_: f64, _: f64| 0.0), vec![]).is_err());
    }

    #[test]
    fn marginal_is_zero_slope_projection() {
        let pool = vec![0.3, 1.1, 0.05, 2.2];
        let fs = |a: f64, b: f64| a * a + (b * a).sin();
        let marginal = marginal_baseline(FnModel(fs), pool.clone()).unwrap();
        let dm = DerivativeModel::first_order(FnModel(|_: f64, _: f64| 0.0), 0.8, 0.2, 0.3);
        let zs = ZeroShotPredictor::new(FnModel(fs), dm, pool).unwrap();
        for &(x2, x3) in &[(0.0, 0.0), (1.3, 4.0), (4.9, 0.2)] {
            assert!((marginal.predict_target(x2, x3) - zs.predict_target(x2, x3)).abs() < 1e-12);
        }
    }

    #[test]
    fn finetune_substitutes_slots() {
        let p = finetune_baseline(FnModel(|a: f64, b: f64| a + 2.0 * b), SlotMapping::default());
        assert_eq!(p.predict_target(1.5, 0.25), 0.25 + 3.0);
        let keep = SlotMapping::from_pairs(&[("X1", "X2"), ("X2", "X2")]).unwrap();
        let c = finetune_baseline(FnModel(|_: f64, _: f64| 4.0), keep);
        assert_eq!(c.predict_target(0.1, 3.0), 4.0);
        assert!(SlotMapping::from_pairs(&[("X1", "X3")]).is_err());
        assert!(SlotMapping::from_pairs(&[("X1", "X3"), ("X1", "X2")]).is_err());
        assert!(SlotMapping::from_pairs(&[("X1", "X9"), ("X2", "X2")]).is_err());
        assert_eq!(
            SlotMapping::from_pairs(&[("X2", "X2"), ("X1", "X3")]).unwrap(),
            SlotMapping::default()
        );
    }

    fn constant_curve(c: f64) -> FeedforwardRegressor {
        let mut m = FeedforwardRegressor::zeros(&[1, 2, 1]).unwrap();
        m.set_output_affine(c, 1.0);
        m
    }

    #[test]
    fn additive_correction_removes_double_count() {
        let p: BaselinePredictor = BaselinePredictor::NaiveAdditive {
            terms: vec![
                AdditiveTerm { covariate: "X2".into(), model: constant_curve(3.0) },
                AdditiveTerm { covariate: "X3".into(), model: constant_curve(3.0) },
            ],
            correction: -3.0,
        };
        assert_eq!(p.predict_target(1.0, 2.0), 3.0);
        assert_eq!(p.tag(), "NaiveAdditive");
    }

    #[test]
    fn serde_carries_tag() {
        let p: BaselinePredictor = BaselinePredictor::Marginal { source: FeedforwardRegressor::zeros(&[2, 3, 1]).unwrap(), pool: vec![1.0] };
        let json = serde_json::to_string(&p).unwrap();
        assert!(json.contains(r#""tag":"Marginal""#));
        let back: BaselinePredictor = serde_json::from_str(&json).unwrap();
        assert_eq!(back, p);
        let ft: BaselinePredictor = finetune_baseline(FeedforwardRegressor::zeros(&[2, 3, 1]).unwrap(), SlotMapping::default());
        let back: BaselinePredictor = serde_json::from_str(&serde_json::to_string(&ft).unwrap()).unwrap();
        assert_eq!(back, ft);
    }
}
