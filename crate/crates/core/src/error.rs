use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, CimtError>;

#[derive(Debug, Error)]
pub enum CimtError {
    #[error("invalid input for {image_id}: {reason}")]
    InvalidInput { image_id: String, reason: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("{source_name}:{line}: {reason}")]
    Parse {
        source_name: String,
        line: usize,
        reason: String,
    },

    #[error("duplicate image_id {image_id} at line {line}")]
    DuplicateId { image_id: String, line: usize },

    #[error("geometry error for {image_id}: {reason}")]
    Geometry { image_id: String, reason: String },

    #[error("numeric error for {image_id} at ({x}, {y}): {reason}")]
    Numeric {
        image_id: String,
        x: usize,
        y: usize,
        reason: String,
    },

    #[error("unparseable image id {0:?}: no clin_<digits> token")]
    UnparseableId(String),

    #[error("invalid phantom spec: {0}")]
    InvalidSpec(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
}

impl CimtError {
    pub(crate) fn invalid_input(image_id: &str, reason: impl Into<String>) -> Self {
        CimtError::InvalidInput {
            image_id: image_id.to_string(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CimtError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn csv(path: impl Into<PathBuf>, source: csv::Error) -> Self {
        CimtError::Csv {
            path: path.into(),
            source,
        }
    }
}
