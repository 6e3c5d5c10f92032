use thiserror::Error;

#[derive(Debug, Error)]
pub enum SmpError {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("semigroup time must be nonnegative, got {0}")]
    NegativeTime(f64),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("non-finite {quantity} on path {path} at step {step}")]
    NonFinite {
        quantity: &'static str,
        path: usize,
        step: usize,
    },

    #[error("control is not admissible at path {path}, step {step}")]
    Inadmissible { path: usize, step: usize },

    #[error("operation requires {0}")]
    Unsupported(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, SmpError>;

pub(crate) fn check_len(context: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(SmpError::DimensionMismatch { context, expected, got })
    }
}
