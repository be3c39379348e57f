use thiserror::Error;

#[derive(Debug, Error)]
pub enum NestError {
    #[error("invalid dimension: {0}")]
    InvalidDimension(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: usize, got: usize },

    #[error("value outside domain: {0}")]
    Domain(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("empty stimulus history")]
    EmptyHistory,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid bounds: {0}")]
    InvalidBounds(String),

    #[error("stimulus outside bounds: {0}")]
    OutOfBounds(String),

    #[error("kernel matrix is singular after jitter escalation (last jitter {jitter:e})")]
    SingularKernel { jitter: f64 },

    #[error("invalid configuration: {field}: {reason}")]
    Config { field: String, reason: String },

    #[error("members are not compatible: {0}")]
    Mismatch(String),

    #[error("document parse error: {0}")]
    Parse(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl NestError {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        NestError::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, NestError>;
