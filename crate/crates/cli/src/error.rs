use std::path::PathBuf;

use thiserror::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] neurossm::Error),
    #[error("{0}")]
    Usage(String),
    #[error("missing {what}: {} (run `{stage}` first)", path.display())]
    MissingPrerequisite { what: &'static str, path: PathBuf, stage: &'static str },
    #[error("{} was produced by a different configuration (stored hash {stored}, expected {expected})", path.display())]
    ConfigMismatch { path: PathBuf, stored: String, expected: String },
    #[error("io error on {}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        use neurossm::Error as E;
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::MissingPrerequisite { .. } | CliError::ConfigMismatch { .. } | CliError::Io { .. } => EXIT_DATA,
            CliError::Core(e) => match e {
                E::Config(_) | E::InvalidParameter(_) | E::Placement(_) => EXIT_USAGE,
                E::Data(_) | E::Format { .. } | E::Io(_) | E::Shape(_) => EXIT_DATA,
                E::Numeric(_) | E::GridViolation(_) => EXIT_NUMERIC,
            },
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
    let path = path.into();
    move |source| CliError::Io { path, source }
}
