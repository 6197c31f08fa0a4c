use std::path::Path;

use oqat_core::OqatError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] OqatError),

    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },

    #[error("checkpoint {path}: {detail}")]
    Checkpoint { path: String, detail: String },

    #[error("{0}")]
    Usage(String),
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io { path: path.display().to_string(), source }
    }

    pub fn checkpoint(path: &Path, detail: impl Into<String>) -> Self {
        CliError::Checkpoint { path: path.display().to_string(), detail: detail.into() }
    }

    /// 2 configuration, 3 numerical abort, 4 bound or property violation,
    /// 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(e) => match e {
                OqatError::Config(_) | OqatError::Space(_) | OqatError::ArchOutOfSpace { .. } | OqatError::Quant(_) | OqatError::InfeasibleBudget { .. } | OqatError::EmptyBucket { .. } => 2,
                OqatError::NonFiniteLoss { .. } => 3,
                OqatError::BoundViolation { .. } => 4,
                _ => 1,
            },
            CliError::Checkpoint { .. } => 4,
            CliError::Io { .. } => 1,
        }
    }
}
