use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors raised anywhere in the detection pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty input")]
    EmptyInput,

    #[error("shape mismatch in {context}: expected {expected:?}, got {got:?}")]
    Shape { context: &'static str, expected: Vec<usize>, got: Vec<usize> },

    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("missing flow for {video_id} pair ({from}, {to})")]
    MissingFlow { video_id: String, from: usize, to: usize },

    #[error("missing prerequisite {path}: run `{command}` first")]
    MissingArtifact { path: PathBuf, command: &'static str },

    #[error("non-finite {term} loss")]
    NonFiniteTerm { term: &'static str },

    #[error("non-finite loss at step {step} (epoch {epoch}): {report}")]
    NonFiniteLoss { step: usize, epoch: usize, report: String },

    #[error("AUROC undefined: labels contain a single class")]
    AurocUndefined,

    #[error("io error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Coarse error classes used to pick a process exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    Data,
    Numerical,
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) => ErrorClass::Usage,
            Error::NonFiniteTerm { .. } | Error::NonFiniteLoss { .. } => ErrorClass::Numerical,
            _ => ErrorClass::Data,
        }
    }
}
