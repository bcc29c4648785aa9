use thiserror::Error;

/// Errors raised across fitting, inference and simulation.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller passed arguments with mismatched dimensions or out-of-range values.
    #[error("invalid argument: {0}")]
    Argument(String),
    /// The data cannot support the requested fit (missing classes, empty design, ...).
    #[error("data error: {0}")]
    Data(String),
    /// A numerical step of the inference pipeline failed.
    #[error("inference error: {0}")]
    Inference(String),
    /// Quasi-complete separation in an unpenalized fit.
    #[error("separation detected: {0}")]
    Separation(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn argument<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Argument(msg.into()))
}
