use thiserror::Error;

/// Library-wide error type. Numerical failures carry enough context to
/// decide between "reject this MCMC proposal" and "abort the run".
#[derive(Debug, Error)]
pub enum SageError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("Cholesky factorization failed (matrix not positive definite after max jitter {max_jitter:e})")]
    Cholesky { max_jitter: f64 },

    #[error("line {line}: {msg}")]
    CsvData { line: u64, msg: String },

    #[error("validation: {0}")]
    Validation(String),

    #[error("inference: {0}")]
    Inference(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("serialization: {0}")]
    Serde(String),
}

impl From<serde_json::Error> for SageError {
    fn from(e: serde_json::Error) -> Self {
        SageError::Serde(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, SageError>;
