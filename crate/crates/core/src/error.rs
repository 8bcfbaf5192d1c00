use thiserror::Error;

use crate::bitstream::{CoderError, ContainerError};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("input error: {0}")]
    Input(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("checkpoint load error: {0}")]
    Load(String),
    #[error("digest mismatch: container expects {expected}, backbone has {actual}")]
    DigestMismatch { expected: String, actual: String },
    #[error("training diverged in {stage} at iteration {iter}: {detail}")]
    Divergence {
        stage: String,
        iter: usize,
        detail: String,
    },
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error(transparent)]
    Coder(#[from] CoderError),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Short machine-readable category, used by the CLI error records.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Input(_) => "input",
            Error::Config(_) => "config",
            Error::Shape(_) => "shape",
            Error::Load(_) => "load",
            Error::DigestMismatch { .. } => "digest_mismatch",
            Error::Divergence { .. } => "divergence",
            Error::Dataset(_) => "dataset",
            Error::Coder(_) => "coder",
            Error::Container(_) => "container",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }
}
