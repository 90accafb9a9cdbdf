use demt_core::DemtError;
use thiserror::Error;

/// Failures of a command, each mapped to one process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error(transparent)]
    Core(#[from] DemtError),

    #[error("verification failed: {0}")]
    Verification(String),
}

impl CliError {
    /// 1 usage or configuration, 2 IO or file format, 3 verification failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Verification(_) => 3,
            CliError::Core(e) => match e {
                DemtError::Config(_) | DemtError::InvalidArgument(_) | DemtError::Shape { .. } => 1,
                DemtError::Io { .. }
                | DemtError::CorruptHeader { .. }
                | DemtError::Truncated { .. }
                | DemtError::ManifestMismatch { .. }
                | DemtError::VersionMismatch { .. }
                | DemtError::Format(_) => 2,
            },
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
