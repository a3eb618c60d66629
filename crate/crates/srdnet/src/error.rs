use thiserror::Error;

/// Unified error type for the crate.
#[derive(Debug, Error)]
pub enum SrdError {
    /// Tensor shapes incompatible with the requested operation.
    #[error("shape error: {0}")]
    Shape(String),

    /// Inconsistent or out-of-range configuration.
    #[error("config error: {0}")]
    Config(String),

    /// API misuse (e.g. backward on a non-scalar).
    #[error("usage error: {0}")]
    Usage(String),

    /// Malformed or truncated serialized data.
    #[error("decode error: {0}")]
    Decode(String),

    /// Metric has no defined value on the given inputs.
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    /// Training produced a non-finite value; names the first bad tensor.
    #[error("non-finite loss at step {step}: first non-finite tensor is `{tensor}`")]
    NonFinite { step: u64, tensor: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SrdError>;

impl SrdError {
    pub fn shape(msg: impl Into<String>) -> Self {
        SrdError::Shape(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        SrdError::Config(msg.into())
    }
    pub fn decode(msg: impl Into<String>) -> Self {
        SrdError::Decode(msg.into())
    }
}
