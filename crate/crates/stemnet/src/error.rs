use std::io;
use std::path::Path;

use crate::checkpoint::CheckpointError;
use crate::nifti::NiftiError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("I/O error on {path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Nifti(#[from] NiftiError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Core(#[from] stemnet_core::Error),
    #[error("subject sets differ: {0}")]
    SubjectMismatch(String),
    #[error("gradient check failed for: {0}")]
    GradcheckFailed(String),
}

impl CliError {
    pub fn io(path: &Path, source: io::Error) -> Self {
        CliError::Io { path: path.display().to_string(), source }
    }

    /// 2 for usage and configuration problems, 1 for everything else.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 2,
            CliError::Core(stemnet_core::Error::Config(_) | stemnet_core::Error::MissingCenter) => 2,
            CliError::Nifti(NiftiError::Core(stemnet_core::Error::Config(_))) => 2,
            _ => 1,
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
