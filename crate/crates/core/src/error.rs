use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A model or experiment parameter is outside its admissible range.
    #[error("invalid configuration: {field}: {reason}")]
    Config { field: String, reason: String },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Bounded drift cannot produce a non-finite state, so this always signals a bug.
    #[error("non-finite state on path {path} at step {step}")]
    NonFinite { path: usize, step: usize },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("thread pool: {0}")]
    ThreadPool(#[from] rayon::ThreadPoolBuildError),
}

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn require_positive(field: &str, value: f64) -> Result<()> {
    if value.is_finite() && value > 0.0 {
        Ok(())
    } else {
        Err(Error::config(field, format!("must be a positive finite number, got {value}")))
    }
}

pub(crate) fn require_finite(field: &str, value: f64) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("{field} must be finite, got {value}")))
    }
}
