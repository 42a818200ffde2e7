use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = CdpError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CdpError {
    #[error("invalid config: {field}: {reason}")]
    InvalidConfig { field: String, reason: String },

    #[error("bad file format in {context}: {reason}")]
    Format { context: String, reason: String },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("truncated payload: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },

    #[error("unknown sample id {0}")]
    UnknownId(u64),

    #[error("zero-norm vector for sample {0}")]
    ZeroNorm(u64),

    #[error("zero-norm vector")]
    ZeroVector,

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("missing input: {}", .0.display())]
    MissingInput(PathBuf),

    #[error("stage artifact mismatch: {0}")]
    StageMismatch(String),

    #[error("internal invariant violated: {0}")]
    Invariant(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CdpError {
    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        CdpError::InvalidConfig {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn format(context: impl Into<String>, reason: impl Into<String>) -> Self {
        CdpError::Format {
            context: context.into(),
            reason: reason.into(),
        }
    }
}
