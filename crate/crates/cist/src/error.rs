use std::path::{Path, PathBuf};

use thiserror::Error;

/// Failures of the command-line layer. Each maps to a process exit code.
#[derive(Debug, Error)]
pub enum Error {
    #[error("usage: {0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}:{column} (byte {offset}): {message}")]
    Format {
        path: PathBuf,
        line: u64,
        column: usize,
        offset: u64,
        message: String,
    },
    #[error("{}: refusing to overwrite existing output (pass --force)", .0.display())]
    Exists(PathBuf),
    #[error("{0}")]
    Core(#[from] cist_core::Error),
    #[error("verification failed: {0}")]
    Verification(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_VERIFICATION: i32 = 3;
pub const EXIT_DIVERGED: i32 = 4;

impl Error {
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) => EXIT_USAGE,
            Error::Core(cist_core::Error::Diverged { .. }) => EXIT_DIVERGED,
            Error::Core(cist_core::Error::Config(_)) => EXIT_USAGE,
            Error::Verification(_) => EXIT_VERIFICATION,
            Error::Io { .. } | Error::Format { .. } | Error::Exists(_) | Error::Core(_) => EXIT_INPUT,
        }
    }

    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}
