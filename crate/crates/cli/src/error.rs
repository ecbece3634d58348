use std::fmt;
use std::path::Path;

use kvedit_core::{Error, ErrorClass};

#[derive(Debug)]
pub enum CliError {
    /// Bad flags or config file.
    Usage(String),
    /// Inputs that parse but do not fit together, e.g. an unknown label.
    Data(String),
    /// A library error raised while running `stage`.
    Core { stage: &'static str, source: Error },
    /// The command ran but an assertion it checks did not hold.
    Verification(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Core { source, .. } => match source.class() {
                ErrorClass::Data => 2,
                ErrorClass::Numerical => 3,
            },
            CliError::Verification(_) => 4,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(msg) => write!(f, "usage: {msg}"),
            CliError::Data(msg) => write!(f, "data: {msg}"),
            CliError::Core { stage, source } => write!(f, "{stage}: {source}"),
            CliError::Verification(msg) => write!(f, "verification failed: {msg}"),
        }
    }
}

/// Attaches the stage name to library errors.
pub trait Stage<T> {
    fn stage(self, stage: &'static str) -> Result<T, CliError>;
}

impl<T> Stage<T> for Result<T, Error> {
    fn stage(self, stage: &'static str) -> Result<T, CliError> {
        self.map_err(|source| CliError::Core { stage, source })
    }
}

pub fn io_error(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_owned(),
        source,
    }
}
