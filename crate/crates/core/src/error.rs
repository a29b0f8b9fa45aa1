//! Error types shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Shape mismatch in a tensor operation; names both offending shapes.
    #[error("dimension mismatch in {op}: lhs {lhs:?} vs rhs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// Invalid argument value (k > n, temperature <= 0, label out of range, ...).
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// Non-finite values where finite ones are required, or training divergence.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// Inconsistent model or bank configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// An allocation estimate exceeded the supported size.
    #[error("resource limit: {0}")]
    Resource(String),

    /// Prompt or generation exceeded the model's context window.
    #[error("generation error: {0}")]
    Generation(String),

    /// Malformed artifact or config file.
    #[error("format error: {0}")]
    Format(String),

    /// Artifact section failed its checksum.
    #[error("corrupt artifact: checksum mismatch in section '{section}'")]
    Corrupt { section: String },

    /// Gradient-tape misuse; indicates a bug, not bad input.
    #[error("internal error: {0}")]
    Internal(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: 1 usage, 2 data/validation, 3 numeric.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Parameter(_) => 1,
            Error::Numeric(_) => 3,
            _ => 2,
        }
    }
}
