use std::path::PathBuf;

use crate::ClassId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("format error in {field}: {reason}")]
    Format { field: String, reason: String },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("consistency error: {0}")]
    Consistency(String),

    #[error("unknown class id {0}")]
    UnknownClass(ClassId),

    #[error("duplicate class id {0}")]
    DuplicateClass(ClassId),

    #[error("dimension mismatch for class '{class}': expected {expected}, got {got}")]
    EmbeddingDim {
        class: String,
        expected: usize,
        got: usize,
    },

    #[error("non-finite loss at iteration {iteration}: {components}")]
    NonFiniteLoss { iteration: usize, components: String },

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn format(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Format {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by user-supplied configuration rather than runtime failures.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::DuplicateClass(_) | Error::UnknownClass(_)
        )
    }
}
