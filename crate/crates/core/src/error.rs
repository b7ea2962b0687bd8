use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A tensor did not have the extent an operation expected along one axis.
    #[error("{op}: dimension mismatch on axis {axis}: expected {expected}, got {got}")]
    Dimension {
        op: &'static str,
        axis: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },

    #[error("label {label} at (b={batch}, y={y}, x={x}) is out of range for {classes} classes")]
    LabelOutOfRange {
        label: u32,
        classes: usize,
        batch: usize,
        y: usize,
        x: usize,
    },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("non-finite value in {what}")]
    NonFinite { what: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("registry: {0}")]
    Registry(String),

    #[error("previous-model registry is empty")]
    EmptyRegistry,

    #[error("config line {line}: key `{key}`: {message}")]
    Config {
        line: usize,
        key: String,
        message: String,
    },

    #[error("malformed {what} at row {row}: {message}")]
    Malformed {
        what: &'static str,
        row: usize,
        message: String,
    },

    #[error("bad file format: {0}")]
    Format(String),

    #[error("training aborted at epoch {epoch}, step {step}: {reason}")]
    Aborted {
        epoch: u32,
        step: u64,
        reason: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
