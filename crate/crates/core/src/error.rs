use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        got: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{context}: distribution does not sum to 1 (row {row} sums to {sum})")]
    NotNormalized {
        context: &'static str,
        row: usize,
        sum: f64,
    },

    #[error("training diverged at step {step}: loss is {loss}")]
    Divergence { step: u64, loss: f64 },

    #[error("architecture mismatch: expected `{expected}`, found `{found}`\n{diff}")]
    ArchMismatch {
        expected: String,
        found: String,
        diff: String,
    },

    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("sample {sample_id}: {msg}")]
    Sample { sample_id: u64, msg: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }

    /// True for errors caused by malformed or inconsistent files on disk.
    pub fn is_file_format(&self) -> bool {
        matches!(
            self,
            Error::Format { .. } | Error::Sample { .. } | Error::ArchMismatch { .. }
        )
    }
}
