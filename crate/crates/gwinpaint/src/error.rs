use std::path::{Path, PathBuf};

use gwinpaint_core::Category;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] gwinpaint_core::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: malformed file: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("config error: {0}")]
    Config(String),
    #[error("compatibility error: {0}")]
    Compatibility(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io { path: path.to_path_buf(), source }
    }

    pub fn format(path: &Path, msg: impl Into<String>) -> Self {
        Error::Format { path: path.to_path_buf(), msg: msg.into() }
    }

    /// Process exit code for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Io { .. } | Error::Format { .. } => 3,
            Error::Compatibility(_) => 4,
            Error::Core(e) => match e.category() {
                Category::Config => 2,
                Category::Data => 3,
                Category::Compatibility => 4,
                Category::Numerical => 5,
            },
        }
    }
}
