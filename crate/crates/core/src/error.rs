use thiserror::Error;

pub type Result<T, E = FedError> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FedError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("dimension mismatch: expected {expected}, got {actual} ({context})")]
    DimensionMismatch {
        expected: usize,
        actual: usize,
        context: String,
    },

    #[error("invalid weights: {0}")]
    InvalidWeights(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("numeric overflow at local step {step}")]
    NumericOverflow { step: usize },

    #[error("client {client} delivered an update {staleness} rounds stale (cap {cap})")]
    StalenessCap {
        client: usize,
        staleness: usize,
        cap: usize,
    },

    #[error("unavailable: {0}")]
    Unavailable(String),

    #[error("seed {0} appears more than once in the ensemble")]
    SeedCollision(u64),
}

pub(crate) fn invalid(msg: impl Into<String>) -> FedError {
    FedError::InvalidConfig(msg.into())
}
