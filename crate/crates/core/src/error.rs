use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed header {path}: {source}")]
    Header {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("invalid volume file: {0}")]
    Format(String),
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("index {index} out of range 0..{len}")]
    OutOfRange { index: usize, len: usize },
    #[error("mask is empty: {0}")]
    EmptyMask(&'static str),
    #[error("no eligible supervoxel in volume")]
    NoEligibleSupervoxel,
    #[error("label emptied by transform after {0} attempts")]
    TransformFailed(usize),
    #[error("lesion placement failed after {0} attempts")]
    LesionPlacement(usize),
    #[error("training diverged at step {step}")]
    Diverged { step: usize },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line tool: 2 for I/O, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } => 2,
            _ => 1,
        }
    }
}
