use thiserror::Error;

/// Errors raised by the numerical building blocks.
///
/// The filters never surface these to callers as failures of a run; they are
/// converted into a recorded [`crate::filter::DivergenceReason`] instead.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("matrix is not positive definite (pivot {pivot} = {value:e})")]
    NotPositiveDefinite { pivot: usize, value: f64 },

    #[error("moment for multi-index {index:?} is missing")]
    MissingMoment { index: Vec<u32> },

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("eigendecomposition did not converge within {0} iterations")]
    NoConvergence(usize),

    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),

    #[error("matrix is not tridiagonal (max off-band entry {0:e})")]
    NotTridiagonal(f64),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
