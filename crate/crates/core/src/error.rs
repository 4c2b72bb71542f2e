use thiserror::Error;

/// Errors raised by the estimation pipeline.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("matrix is not symmetric positive definite")]
    NotPositiveDefinite,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("too few points: need at least {needed}, have {found}")]
    TooFewPoints { needed: usize, found: usize },

    /// The truncated likelihood has no maximizer in the parameter space.
    #[error("maximum likelihood estimate does not exist: {0}")]
    NonExistence(String),

    #[error("E-step failed: {0}; increase the Monte-Carlo budget")]
    EStepStarvation(String),

    #[error("singular information matrix")]
    SingularMatrix,

    #[error("infeasible starting point: {0}")]
    Infeasible(String),
}

pub type Result<T> = std::result::Result<T, Error>;
