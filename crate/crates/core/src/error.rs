use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("localization failed: {0}")]
    Localization(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("sampling failed: {0}")]
    Sampling(String),

    #[error("metric undefined: {0}")]
    Metric(String),

    #[error("invalid scene spec: {0}")]
    SceneSpec(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("training diverged at step {step}: {message}")]
    Training {
        step: usize,
        message: String,
        last_checkpoint: Option<PathBuf>,
    },

    #[error("malformed {kind} file: {message}")]
    Format { kind: &'static str, message: String },

    #[error("missing dependency: {0}")]
    MissingDependency(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    pub(crate) fn format(kind: &'static str, msg: impl Into<String>) -> Self {
        Error::Format {
            kind,
            message: msg.into(),
        }
    }
}
