use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch for {tensor}: expected {expected}, got {actual}")]
    Shape {
        tensor: String,
        expected: String,
        actual: String,
    },

    #[error("non-finite value in {what} at ({row}, {col})")]
    NonFinite {
        what: String,
        row: usize,
        col: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("sequence of length {len} exceeds context length {context}")]
    SequenceTooLong { len: usize, context: usize },

    #[error("non-finite loss term `{term}`")]
    NonFiniteLoss { term: String },

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("missing artifact: {}", .0.display())]
    MissingArtifact(PathBuf),

    #[error("malformed {what}: {detail}")]
    Format { what: String, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(tensor: impl Into<String>, expected: impl ToString, actual: impl ToString) -> Self {
        Error::Shape {
            tensor: tensor.into(),
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub(crate) fn format(what: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Format {
            what: what.into(),
            detail: detail.into(),
        }
    }

    /// True for errors caused by numerical failure (non-finite values, divergence).
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NonFinite { .. } | Error::NonFiniteLoss { .. } | Error::Diverged(_)
        )
    }
}
