use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = DvaError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum DvaError {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid step: {0}")]
    Step(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("{0} is unavailable in this build")]
    Unavailable(&'static str),

    #[error("{file}: field `{field}`: {msg}")]
    Parse {
        file: PathBuf,
        field: String,
        msg: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

impl DvaError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DvaError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(file: impl Into<PathBuf>, field: impl Into<String>, msg: impl ToString) -> Self {
        DvaError::Parse {
            file: file.into(),
            field: field.into(),
            msg: msg.to_string(),
        }
    }

    /// Short machine-readable category, used by the CLI error line and the C ABI.
    pub fn kind(&self) -> &'static str {
        match self {
            DvaError::Config(_) => "config",
            DvaError::Shape(_) => "shape",
            DvaError::Step(_) => "step",
            DvaError::NonFinite(_) => "non_finite",
            DvaError::Unavailable(_) => "unavailable",
            DvaError::Parse { .. } => "parse",
            DvaError::Io { .. } => "io",
            DvaError::Tensor(_) => "tensor",
        }
    }
}
