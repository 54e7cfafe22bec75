//! Command failures and their process exit codes.

/// A failed command, classified by the stage that failed.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad flags, an invalid configuration or an existing output.
    #[error("{0:#}")]
    Usage(anyhow::Error),
    #[error("data error: {0:#}")]
    Data(anyhow::Error),
    #[error("training error: {0:#}")]
    Training(anyhow::Error),
    #[error("evaluation error: {0:#}")]
    Evaluation(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Training(_) => 3,
            CliError::Evaluation(_) => 4,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Tags a fallible result with the stage it belongs to.
pub trait Stage<T> {
    fn usage(self) -> CliResult<T>;
    fn data(self) -> CliResult<T>;
    fn training(self) -> CliResult<T>;
    fn evaluation(self) -> CliResult<T>;
}

impl<T, E: Into<anyhow::Error>> Stage<T> for Result<T, E> {
    fn usage(self) -> CliResult<T> {
        self.map_err(|e| CliError::Usage(e.into()))
    }
    fn data(self) -> CliResult<T> {
        self.map_err(|e| CliError::Data(e.into()))
    }
    fn training(self) -> CliResult<T> {
        self.map_err(|e| CliError::Training(e.into()))
    }
    fn evaluation(self) -> CliResult<T> {
        self.map_err(|e| CliError::Evaluation(e.into()))
    }
}
