use std::io;
use std::path::{Path, PathBuf};

/// Errors of the command line layer.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("cannot read {}: {source}", path.display())]
    Read { path: PathBuf, source: io::Error },
    #[error("cannot write {}: {source}", path.display())]
    Write { path: PathBuf, source: io::Error },
    /// A file that exists but does not hold what it should.
    #[error("{}: {msg}", path.display())]
    Parse { path: PathBuf, msg: String },
    #[error("{0}")]
    Usage(String),
    #[error("worker thread panicked")]
    Panic,
    #[error(transparent)]
    Core(#[from] qcore::Error),
}

impl CliError {
    pub fn parse(path: &Path, msg: impl std::fmt::Display) -> Self {
        CliError::Parse {
            path: path.to_path_buf(),
            msg: msg.to_string(),
        }
    }

    /// 2 for bad input, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Read { .. } | CliError::Parse { .. } | CliError::Usage(_) => 2,
            CliError::Write { .. } | CliError::Panic => 1,
            CliError::Core(e) if e.is_input_error() => 2,
            CliError::Core(_) => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
