//! Crate-wide error type.

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("empty point cloud")]
    EmptyCloud,

    #[error("invalid point cloud: {0}")]
    InvalidCloud(String),

    #[error("invalid camera: {0}")]
    InvalidCamera(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("stale fragment cache: {0}")]
    StaleCache(String),

    #[error("missing input: {0}")]
    MissingInput(String),

    #[error("parse error in {path}: {msg}")]
    Parse { path: PathBuf, msg: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("non-finite loss at cycle {cycle} step {step}")]
    NonFiniteLoss { cycle: usize, step: usize },
}

impl Error {
    pub fn parse(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            msg: msg.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures of the numerical optimization itself, as opposed to
    /// bad inputs. The CLI maps these to a distinct exit code.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NonFiniteLoss { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
