use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum MeimError {
    #[error("dimension mismatch on {axis}: expected {expected}, got {actual}")]
    Dimension {
        axis: String,
        expected: usize,
        actual: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{kind} id {id} out of range (size {size})")]
    Lookup {
        kind: &'static str,
        id: usize,
        size: usize,
    },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch} (last finite loss: {last_finite:?})")]
    NonFiniteLoss {
        epoch: u64,
        batch: usize,
        last_finite: Option<f64>,
    },
}

impl MeimError {
    pub(crate) fn dim(axis: impl Into<String>, expected: usize, actual: usize) -> Self {
        MeimError::Dimension {
            axis: axis.into(),
            expected,
            actual,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        MeimError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, MeimError>;
