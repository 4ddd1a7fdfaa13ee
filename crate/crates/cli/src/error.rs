use std::path::Path;

use mlt_core::Error as CoreError;

/// Process exit codes.
pub mod exit {
    pub const SUCCESS: i32 = 0;
    /// Internal failure not attributable to input.
    pub const INTERNAL: i32 = 1;
    /// Invalid flags, config keys or values, incompatible checkpoints.
    pub const CONFIG: i32 = 2;
    /// Missing, unreadable or inconsistent data files.
    pub const DATA: i32 = 3;
    /// A self-check or verification failed.
    pub const CHECK: i32 = 4;
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("check failed: {0}")]
    Check(String),
    #[error(transparent)]
    Core(#[from] CoreError),
}

impl CliError {
    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Data(format!("{}: {e}", path.display()))
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => exit::CONFIG,
            CliError::Data(_) => exit::DATA,
            CliError::Check(_) => exit::CHECK,
            CliError::Core(e) => match e {
                CoreError::Io { .. }
                | CoreError::Format { .. }
                | CoreError::Parse { .. }
                | CoreError::Data(_)
                | CoreError::Geometry { .. } => exit::DATA,
                _ => exit::INTERNAL,
            },
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
