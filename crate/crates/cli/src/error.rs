use std::io;
use std::path::Path;

use spin_diffusion::Error as CoreError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },
    #[error(transparent)]
    Core(#[from] CoreError),
}

pub type CliResult<T> = Result<T, CliError>;

/// Process exit codes.
pub mod exit {
    pub const OK: u8 = 0;
    pub const CONFIG: u8 = 1;
    pub const IO: u8 = 2;
    pub const NUMERICAL: u8 = 3;
}

impl CliError {
    pub fn io(path: &Path, source: io::Error) -> Self {
        CliError::Io { path: path.display().to_string(), source }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => exit::CONFIG,
            CliError::Io { .. } => exit::IO,
            CliError::Core(e) => match e {
                CoreError::Io(_) | CoreError::Format(_) => exit::IO,
                CoreError::NonFinite(_) | CoreError::Divergence(_) | CoreError::Grad(_) => exit::NUMERICAL,
                CoreError::Config(_)
                | CoreError::Dimension { .. }
                | CoreError::StepOutOfRange { .. }
                | CoreError::Schedule(_) => exit::CONFIG,
            },
        }
    }
}
