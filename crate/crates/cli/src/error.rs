use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),

    #[error("missing artifact {path}; run `figedit {producer}` first")]
    MissingArtifact { path: PathBuf, producer: &'static str },

    #[error(transparent)]
    Core(#[from] figedit_core::error::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("{0}")]
    Other(String),
}

impl CliError {
    /// 0 success, 2 config error, 3 divergence, 4 missing artifact, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Core(figedit_core::error::Error::Divergence { .. }) => 3,
            CliError::MissingArtifact { .. } => 4,
            _ => 1,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
