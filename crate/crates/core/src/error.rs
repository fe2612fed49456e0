use thiserror::Error;

/// Errors produced anywhere in the training and evaluation pipeline.
#[derive(Debug, Error)]
pub enum ScaError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("invalid config field `{field}`: {message}")]
    Config { field: String, message: String },

    /// A backward pass was requested with a cache recorded against older parameters.
    #[error("stale forward cache: parameters changed since the forward pass")]
    StaleCache,

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl ScaError {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        ScaError::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, ScaError>;
