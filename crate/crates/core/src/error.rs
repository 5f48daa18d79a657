use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: {message}")]
    Record {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite loss `{loss}` at {stage} step {step}")]
    NonFiniteLoss {
        stage: String,
        step: usize,
        loss: String,
    },

    #[error("model not ready: {0}")]
    NotReady(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config key `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("missing prerequisite `{artifact}`; run `{command}` first")]
    MissingDependency { artifact: String, command: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-readable tag for the error family.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Record { .. } => "record",
            Error::EmptyInput(_) => "empty_input",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::Shape(_) => "shape",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::NotReady(_) => "not_ready",
            Error::Checkpoint(_) => "checkpoint",
            Error::Config { .. } => "config",
            Error::MissingDependency { .. } => "missing_dependency",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
