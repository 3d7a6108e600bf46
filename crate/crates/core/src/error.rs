use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse failure class, used by front-ends to pick an exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numerical,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot decode {path}: {reason}")]
    Decode { path: PathBuf, reason: String },

    #[error("cannot encode {path}: {reason}")]
    Encode { path: PathBuf, reason: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("value out of range: {0}")]
    Range(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("tiling error: {0}")]
    Tiling(String),

    #[error("pixel ({row}, {col}) is not covered by any tile")]
    Coverage { row: usize, col: usize },

    #[error("non-finite value in {component}")]
    NonFinite { component: String },

    #[error("covariance factorization failed after {attempts} ridge doublings (last ridge {ridge:e})")]
    Factorization { attempts: usize, ridge: f64 },

    #[error("class {class} queue holds {have} entries, needs {need} before estimation")]
    NotReady {
        class: usize,
        have: usize,
        need: usize,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("empty input: {0}")]
    Empty(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn non_finite(component: impl Into<String>) -> Self {
        Error::NonFinite {
            component: component.into(),
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) => ErrorKind::Config,
            Error::NonFinite { .. } | Error::Factorization { .. } => ErrorKind::Numerical,
            _ => ErrorKind::Data,
        }
    }
}
