//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by vector operations, training, DP accounting and the
/// simulation driver.
#[derive(Debug, Error)]
pub enum Error {
    #[error("vector layouts differ: {0}")]
    LayoutMismatch(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("sample size {0} out of supported range [{1}, {2}]")]
    SampleSize(usize, usize, usize),

    #[error("sample has zero variance")]
    ZeroVariance,

    #[error("need at least {need} items, got {got}")]
    NotEnough { need: usize, got: usize },

    #[error("calibration infeasible: {0}")]
    Infeasible(String),

    #[error("unknown algorithm: {0}")]
    UnknownAlgorithm(String),
}

pub type Result<T> = std::result::Result<T, Error>;
