pub mod baselines;
pub mod cli;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod moments;
pub mod regressor;
pub mod scm;
pub mod surface;
pub mod theory;
pub mod transfer;

pub use error::{OovError, Result};
