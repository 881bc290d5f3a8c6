use std::io;

use orthosync::SyncError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Sync(#[from] SyncError),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub const EXIT_USAGE: u8 = 1;
pub const EXIT_DATA: u8 = 2;
pub const EXIT_NUMERICAL: u8 = 3;

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Sync(e) => sync_exit_code(e),
            CliError::Io(_) | CliError::Csv(_) | CliError::Json(_) => EXIT_DATA,
        }
    }
}

fn sync_exit_code(e: &SyncError) -> u8 {
    match e {
        SyncError::InSequence { source, .. } => sync_exit_code(source),
        SyncError::InvalidArgument(_) | SyncError::TruthRequired => EXIT_USAGE,
        e if e.is_numerical() => EXIT_NUMERICAL,
        _ => EXIT_DATA,
    }
}

pub type CliResult<T> = Result<T, CliError>;
