use thiserror::Error;

pub type Result<T> = std::result::Result<T, OovError>;

#[derive(Debug, Error)]
pub enum OovError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("unknown variable `{0}`")]
    UnknownVariable(String),

    #[error("operation requires a {expected} generating function, got {found}")]
    WrongVariant { expected: &'static str, found: &'static str },

    #[error("need at least {needed} samples, got {got}")]
    InsufficientSamples { needed: usize, got: usize },

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("unsupported moment order {0}")]
    UnsupportedOrder(usize),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("training diverged at epoch {epoch} (loss became non-finite; lower the learning rate)")]
    Divergence { epoch: usize },

    #[error("skew of the unobserved covariate is degenerate: |k3| = {k3:.3e} < {threshold:.1e}")]
    SkewDegenerate { k3: f64, threshold: f64 },

    #[error("moment system is ill-conditioned (condition number {condition:.3e})")]
    DegenerateMoments { condition: f64 },

    #[error("zero divisor at {0}")]
    ZeroDivisor(String),

    #[error("denominator must be positive, got {0}")]
    ZeroDenominator(f64),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
