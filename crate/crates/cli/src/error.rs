use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Rejected configuration; exit code 2.
    #[error("invalid configuration: {0}")]
    Config(#[source] dc3::Error),

    #[error(transparent)]
    Core(#[from] dc3::Error),

    #[error(transparent)]
    Service(#[from] dc3_service::ServiceError),

    #[error("{0}")]
    Invalid(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Core(e) if is_config_error(e) => 2,
            _ => 1,
        }
    }
}

fn is_config_error(e: &dc3::Error) -> bool {
    matches!(
        e,
        dc3::Error::InvalidConfig(_) | dc3::Error::UnknownBackbone(_) | dc3::Error::UnknownAlgorithm(_)
    )
}
