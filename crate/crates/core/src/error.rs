use std::path::PathBuf;

use crate::tensor::Shape;

/// Errors raised anywhere in the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch, expected {expected}, got {got}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        got: String,
    },

    #[error("{op}: incompatible shapes {lhs} and {rhs}")]
    Broadcast {
        op: &'static str,
        lhs: Shape,
        rhs: Shape,
    },

    #[error("invalid convolution spec: {0}")]
    InvalidSpec(String),

    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },

    #[error("graph: {0}")]
    Graph(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("archive: {0}")]
    Archive(String),

    #[error("tensor `{name}` has shape {got}, expected {expected}")]
    ParamShape {
        name: String,
        expected: String,
        got: String,
    },

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("missing gradient for trainable parameter `{0}`")]
    MissingGradient(String),

    #[error("data: {0}")]
    Data(String),

    #[error("mask values must be 0 or 1 (found {0})")]
    NonBinary(String),

    #[error("non-finite loss {loss} at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize, loss: f64 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        Error::ShapeMismatch {
            op,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }
}
