use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("input error: {0}")]
    Input(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("training error: {0}")]
    Training(String),
    #[error("generation error: {0}")]
    Generation(String),
    #[error("planning error: {0}")]
    Planning(String),
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("parse error: {message}; raw payload: {raw}")]
    Parse { message: String, raw: String },
    #[error("validation error: {0}")]
    Validation(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("http error: {0}")]
    Http(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures caused by the filesystem, network or configuration
    /// rather than by the data or the algorithms.
    pub fn is_environmental(&self) -> bool {
        matches!(
            self,
            Error::Io(_) | Error::Json(_) | Error::Config(_) | Error::Http(_)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
