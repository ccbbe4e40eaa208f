use thiserror::Error;

/// Errors shared across the crate.
#[derive(Debug, Error)]
pub enum CoreError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    DimensionMismatch {
        expected: usize,
        got: usize,
        context: &'static str,
    },

    #[error("class {class} has only {available} labeled examples, need {needed}")]
    InsufficientData {
        class: usize,
        available: usize,
        needed: usize,
    },

    #[error("cosine similarity undefined for zero-norm input")]
    UndefinedSimilarity,

    #[error("parse error at row {row}: {message}")]
    Parse { row: usize, message: String },

    #[error("format error at row {row}: {message}")]
    Format { row: usize, message: String },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("state error: {0}")]
    State(String),

    #[error("non-finite gradient in parameter group '{group}' at step {step}")]
    NonFiniteGradient { group: String, step: u64 },

    #[error("non-finite loss at step {step} (ce={ce}, kd={kd})")]
    NonFiniteLoss { step: u64, ce: f64, kd: f64 },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;
