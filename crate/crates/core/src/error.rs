//! Crate-wide error type.

use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("{path}: header mismatch at position {position}: expected {expected:?}, found {found:?}")]
    HeaderMismatch {
        path: PathBuf,
        position: usize,
        expected: String,
        found: String,
    },

    #[error("{path}: row {row}, column {column:?}: cannot parse {value:?} as a finite number")]
    BadNumericCell {
        path: PathBuf,
        row: usize,
        column: String,
        value: String,
    },

    #[error("invalid schema: {0}")]
    Schema(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("column {0:?} not found")]
    MissingColumn(String),

    #[error("the label column {0:?} cannot be dropped")]
    ProtectedColumn(String),

    #[error("empty table")]
    EmptyTable,

    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("dataset invariant violated: {0}")]
    DatasetInvariant(String),

    #[error("training aborted: non-finite loss at epoch {epoch}, batch {batch} ({context})")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        context: String,
    },

    #[error("corrupt artifact {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },

    #[error("format version mismatch in {path}: file has v{found}, this build reads v{expected}")]
    VersionMismatch {
        path: PathBuf,
        found: u32,
        expected: u32,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("invariant violated: {0}")]
    Invariant(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn corrupt(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Corrupt {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
