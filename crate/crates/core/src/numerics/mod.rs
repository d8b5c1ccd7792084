//! Shared numeric kernel: seeded randomness, weighted ridge regression and
//! the agreement statistics used by the validation pipelines.

mod alpha;
mod ridge;
mod rng;
mod stats;

pub use alpha::{krippendorff_alpha_nominal, RatingsMatrix};
pub use ridge::{weighted_ridge, Matrix, RidgeFit};
pub use rng::{derive_seed, Rng};
pub use stats::{cosine_distance, mean, pearson, topk_mean_abs};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("need at least {needed} values, got {got}")]
    TooShort { needed: usize, got: usize },
    #[error("correlation undefined: input vector is constant")]
    UndefinedCorrelation,
    #[error("cosine distance undefined: zero vector")]
    DegenerateVector,
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("singular normal equations (lambda = {lambda})")]
    Singular { lambda: f64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}
