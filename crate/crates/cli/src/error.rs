use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("all {0} grid cells diverged")]
    AllDiverged(usize),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] featpred::Error),

    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    /// 0 success, 1 configuration, 2 data, 3 every cell diverged; other
    /// failures also exit with 1.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Data(_) => 2,
            CliError::Core(featpred::Error::Format { .. } | featpred::Error::LabelRange { .. } | featpred::Error::Io { .. }) => 2,
            CliError::Core(featpred::Error::Config(_)) => 1,
            CliError::AllDiverged(_) => 3,
            _ => 1,
        }
    }
}
