use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("ingest error at {path}: {msg}")]
    Ingest { path: PathBuf, msg: String },

    #[error("malformed tensor file {path} at byte {offset}: {msg}")]
    Format { path: PathBuf, offset: u64, msg: String },

    #[error("invalid synthetic dataset spec: {0}")]
    Spec(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite {component} loss at epoch {epoch}, step {step}")]
    NonFinite { component: String, epoch: usize, step: usize },

    #[error("evaluation error: {0}")]
    Eval(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn ingest(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Ingest { path: path.into(), msg: msg.into() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
