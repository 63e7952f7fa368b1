use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("grid index {index} out of range 0..={max}")]
    IndexOutOfRange { index: usize, max: usize },
    #[error("index 0 has no left limit")]
    NoLeftLimit,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("extending index {from} by {steps} steps passes the horizon index {n_steps}")]
    PastHorizon {
        from: usize,
        steps: usize,
        n_steps: usize,
    },
    #[error("paths live on different time grids")]
    GridMismatch,
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: String, reason: String },
    #[error("monitor time {0} is not a grid point")]
    OffGridMonitor(f64),
    #[error("model does not have independent increments; the continuation estimator would be biased")]
    NotIndependentIncrements,
    #[error("model is not supported here: {0}")]
    UnsupportedModel(String),
    #[error("empty sample set")]
    EmptySampleSet,
    #[error("matrix is not symmetric (defect {0:e})")]
    Asymmetric(f64),
    #[error("scenario is inconsistent: {0}")]
    Scenario(String),
    #[error("finite difference produced a non-finite value at grid index {0}")]
    DerivativeBlowup(usize),
    #[error("csv: {0}")]
    Csv(String),
}

impl Error {
    pub(crate) fn param(name: &str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name: name.to_string(),
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
