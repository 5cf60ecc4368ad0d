use thiserror::Error;

/// Errors produced by the ranking and portfolio machinery.
#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("unknown model `{0}`")]
    UnknownModel(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("infeasible: {reason} (max achievable coverage {max_nu:.6})")]
    Infeasible { reason: String, max_nu: f64 },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }
}
