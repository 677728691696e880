use std::io;
use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] ditq::Error),
    #[error("{0}")]
    Usage(String),
    #[error("missing artifact {}", .0.display())]
    Missing(PathBuf),
    #[error("I/O error on {}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("assertion failed: {0}")]
    Assertion(String),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    /// 1 internal assertion, 2 usage or configuration, 3 I/O or artifact format.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Assertion(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Missing(_) | CliError::Io { .. } => 3,
            CliError::Core(e) => match e {
                ditq::Error::Config(_) | ditq::Error::AlphaOutOfRange(_) | ditq::Error::RankOutOfRange { .. } => 2,
                e if e.is_io_or_format() => 3,
                ditq::Error::ShapeMismatch(_) | ditq::Error::EmptyStats | ditq::Error::TimestepOutOfRange { .. } => 3,
                _ => 1,
            },
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
