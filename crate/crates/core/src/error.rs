use std::path::PathBuf;

use thiserror::Error;

/// Every failure the library reports.
#[derive(Debug, Error)]
pub enum DemtError {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config: {0}")]
    Config(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("corrupt header in {path}: {detail}")]
    CorruptHeader { path: PathBuf, detail: String },

    #[error("truncated file for sample {index} ({path})")]
    Truncated { index: usize, path: PathBuf },

    #[error("manifest declares {declared} samples but {found} sample files are present")]
    ManifestMismatch { declared: usize, found: usize },

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("malformed input: {0}")]
    Format(String),
}

impl DemtError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        DemtError::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DemtError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, DemtError>;
