use thiserror::Error;

/// Unified error type. `Io`/`Format` map to exit code 2 in the CLI,
/// everything else is a contract failure (exit code 1).
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {details}")]
    Dimension { op: &'static str, details: String },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("format error: {0}")]
    Format(String),
}

impl Error {
    pub fn dim(op: &'static str, details: impl Into<String>) -> Self {
        Error::Dimension { op, details: details.into() }
    }

    /// True for errors caused by the environment (filesystem, malformed
    /// external files) rather than by a violated API contract.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io(_) | Error::Format(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
