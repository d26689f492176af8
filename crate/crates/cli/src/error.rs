use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("output {0} already exists and is not empty; pass --force to overwrite")]
    OutputExists(PathBuf),
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
    #[error(transparent)]
    Core(#[from] moefication::Error),
    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<CliError>,
    },
}

impl CliError {
    /// 2 for anything the user can fix by changing arguments or config,
    /// 1 for failures while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::OutputExists(_) => 2,
            CliError::Core(moefication::Error::Config(_)) => 2,
            CliError::Stage { source, .. } => source.exit_code(),
            _ => 1,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
