use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, EcanError>;

#[derive(Debug, Error)]
pub enum EcanError {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("degenerate feature: row {row} has norm {norm:e}")]
    DegenerateFeature { row: usize, norm: f64 },

    #[error("config error: {0}")]
    Config(String),

    #[error("index error: {index} out of range for {len} rows")]
    Index { index: usize, len: usize },

    #[error("data error: {0}")]
    Data(String),

    #[error("format error in {source_name} at {location}: {message}")]
    Format {
        source_name: String,
        location: String,
        message: String,
    },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl EcanError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        EcanError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(
        source_name: impl Into<String>,
        location: impl Into<String>,
        message: impl Into<String>,
    ) -> Self {
        EcanError::Format {
            source_name: source_name.into(),
            location: location.into(),
            message: message.into(),
        }
    }

    /// Process exit code for the command-line front end: 3 for numeric
    /// failures, 2 for everything else.
    pub fn exit_code(&self) -> u8 {
        match self {
            EcanError::Numeric(_) | EcanError::DegenerateFeature { .. } => 3,
            _ => 2,
        }
    }
}
