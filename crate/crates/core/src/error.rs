use std::io;

use thiserror::Error;

/// Errors produced by kernel computation, training and persistence.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("covariance is not positive semidefinite: {0}")]
    NotPsd(String),

    #[error("kernel system is rank deficient (numerical rank {rank} of {n}); add a ridge term")]
    RankDeficient { rank: usize, n: usize },

    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
