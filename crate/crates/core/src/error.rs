use thiserror::Error;

/// Errors produced by the engine.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// The dataset header is missing a required column or carries an unknown one.
    #[error("schema error: {0}")]
    Schema(String),

    /// A data row failed validation. `row` is the 1-based line number in the file.
    #[error("row {row}: {message}")]
    Row { row: usize, message: String },

    /// A parameter or input is outside the domain of a model function.
    #[error("domain error: {0}")]
    Domain(String),

    /// A model evaluation produced a non-finite value or a singular covariance.
    #[error("evaluation failure: {0}")]
    Evaluation(String),

    /// The request itself is malformed (empty replicate count, bad option).
    #[error("invalid request: {0}")]
    InvalidRequest(String),

    /// Estimation could not start or could not produce a result.
    #[error("estimation failed: {0}")]
    Estimation(String),

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
