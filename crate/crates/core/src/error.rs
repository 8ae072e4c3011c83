use thiserror::Error;

/// Errors produced by the numeric core: shape violations, non-finite
/// values where finiteness is a contract, and serialization failures.
#[derive(Debug, Error)]
pub enum CoreError {
    #[error("shape mismatch: expected {expected}, got {got} ({context})")]
    ShapeMismatch {
        expected: String,
        got: String,
        context: String,
    },

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("dimension {dim} not divisible by {divisor} ({context})")]
    NotDivisible {
        dim: usize,
        divisor: usize,
        context: String,
    },

    #[error("unknown parameter {0:?}")]
    UnknownParameter(String),

    #[error("duplicate parameter {0:?}")]
    DuplicateParameter(String),

    #[error("non-deterministic function: two evaluations at the same point differ ({a} vs {b})")]
    NonDeterministic { a: f64, b: f64 },

    #[error("tensor file {path}: {reason}")]
    TensorFile { path: String, reason: String },

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;
