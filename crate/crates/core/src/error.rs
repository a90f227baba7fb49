use std::io;

use thiserror::Error;

pub type Result<T, E = CacheError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CacheError {
    #[error("not found: {0}")]
    NotFound(String),

    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("shape error: {0}")]
    ShapeError(String),

    #[error("spec mismatch: expected fingerprint {expected:016x}, found {found:016x}")]
    SpecMismatch { expected: u64, found: u64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("CorruptFile: {0}")]
    CorruptFile(String),

    #[error("eviction of agent {agent} failed: {reason}")]
    EvictionFailed { agent: String, reason: String },

    #[error("agent {agent} needs {needed} bytes but the pool budget is {budget}")]
    OverBudget {
        agent: String,
        needed: u64,
        budget: u64,
    },

    #[error("engine failure: {0}")]
    Engine(String),

    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

impl CacheError {
    /// Stable short code used on the wire and in CLI messages.
    pub fn code(&self) -> &'static str {
        match self {
            CacheError::NotFound(_) => "not_found",
            CacheError::InvalidValue(_) => "invalid_value",
            CacheError::ShapeError(_) => "shape_error",
            CacheError::SpecMismatch { .. } => "spec_mismatch",
            CacheError::InvalidArgument(_) => "invalid_argument",
            CacheError::CorruptFile(_) => "corrupt_file",
            CacheError::EvictionFailed { .. } => "eviction_failed",
            CacheError::OverBudget { .. } => "over_budget",
            CacheError::Engine(_) => "engine_error",
            CacheError::Io(_) => "io_error",
        }
    }
}
