use thiserror::Error;

/// Errors produced anywhere in the estimation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("non-finite iterate at n = {n}")]
    NonFiniteIterate { n: u64 },

    #[error("no convergence after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("every sample is degenerate at the evaluation point")]
    AllDegenerate,

    #[error("dataset is degenerate: all points coincide")]
    DegenerateDataset,

    #[error("need at least {required} points to fit a slope, found {found}")]
    InsufficientPoints { found: usize, required: usize },

    #[error("moment at n = {n} is not strictly positive")]
    NonPositiveMoment { n: u64 },

    #[error("{failed} of {total} replicates aborted")]
    TooManyFailures { failed: usize, total: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("ground truth unavailable: {0}")]
    GroundTruthUnavailable(String),

    #[error("config line {line}: {msg}")]
    Config { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidParameter(msg.into())
}

pub(crate) fn check_dim(expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, found })
    }
}
