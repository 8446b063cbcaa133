use std::io;

use thiserror::Error;

/// Errors raised by the DAU library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: &'static str,
        expected: String,
        actual: String,
    },
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("finite-difference oracle failed at coordinate {coordinate}: loss was {value}")]
    Oracle { coordinate: usize, value: f64 },
    #[error("data error: {0}")]
    Data(String),
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },
    #[error("checksum mismatch in block `{block}`")]
    Checksum { block: String },
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("network build failed at layer {layer} ({kind}): {message}")]
    Build {
        layer: usize,
        kind: String,
        message: String,
    },
    #[error("config error: {0}")]
    Config(String),
    #[error("analysis error: {0}")]
    Analysis(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn dim(context: &'static str, expected: impl ToString, actual: impl ToString) -> Self {
        Error::Dimension {
            context,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }
}
