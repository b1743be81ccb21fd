use std::io;

/// Errors raised anywhere in the library.
///
/// The variants are coarse on purpose: the CLI maps them onto exit codes
/// (configuration, I/O, numerical divergence).
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("step {t} out of range 1..={steps}")]
    StepOutOfRange { t: usize, steps: usize },
    #[error("infeasible noise schedule: {0}")]
    Schedule(String),
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("differentiation error: {0}")]
    Grad(String),
    #[error("malformed file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    /// True for errors caused by bad numbers rather than bad inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NonFinite(_) | Error::Divergence(_))
    }
}
