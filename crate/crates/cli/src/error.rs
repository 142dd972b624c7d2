use std::path::Path;

use thiserror::Error;

/// Command failure, classified by exit code.
#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags, unreadable or invalid configuration. Exit code 1.
    #[error("config error: {0}")]
    Config(String),
    /// Missing, malformed or mismatched input data. Exit code 2.
    #[error("data error: {0}")]
    Data(String),
    /// Training produced a non-finite loss. Exit code 3.
    #[error("{0}")]
    NonFiniteLoss(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Data(_) => 2,
            CliError::NonFiniteLoss(_) => 3,
        }
    }

    pub fn config(msg: impl std::fmt::Display) -> Self {
        CliError::Config(msg.to_string())
    }

    pub fn data(msg: impl std::fmt::Display) -> Self {
        CliError::Data(msg.to_string())
    }

    pub fn data_at(path: &Path, msg: impl std::fmt::Display) -> Self {
        CliError::Data(format!("{}: {msg}", path.display()))
    }
}

impl From<refine_core::trainer::TrainError> for CliError {
    fn from(e: refine_core::trainer::TrainError) -> Self {
        use refine_core::trainer::TrainError;
        match e {
            TrainError::NonFiniteLoss { .. } => CliError::NonFiniteLoss(e.to_string()),
            TrainError::DimensionMismatch { .. } | TrainError::Model(_) => CliError::Data(e.to_string()),
            TrainError::InvalidConfig(_) | TrainError::Loss(_) | TrainError::Prior(_) => {
                CliError::Config(e.to_string())
            }
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
