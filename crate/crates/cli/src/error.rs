use std::path::PathBuf;

use latent_selftrain::Error as CoreError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Validation(Vec<String>),
    #[error("missing {}: run `selftrain {producer}` first", artifact.display())]
    Prerequisite { artifact: PathBuf, producer: &'static str },
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    /// Process exit status for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Prerequisite { .. } => 2,
            CliError::Numeric(_) | CliError::Core(CoreError::Numeric(_)) => 3,
            _ => 1,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
