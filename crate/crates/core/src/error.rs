use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the laboratory.
///
/// The variants split into two families that the command line maps onto
/// different exit codes: validation problems with the caller's input
/// (`InvalidInput`, `Format`, `Assumption`, `Domain`, `Io`) and failures of a
/// computation or verification on otherwise valid input (`Numerical`,
/// `Verification`).
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("{}:{line}: {msg}", path.display())]
    Format {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    /// The collective gram matrix is singular, so the least-squares
    /// minimizer is not unique.
    #[error("full-rank assumption violated: {0}")]
    Assumption(String),

    /// A parameter lies outside the range a formula or guarantee requires.
    #[error("parameter out of range: {0}")]
    Domain(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("verification failed: {0}")]
    Verification(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }

    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    /// True when the error is the caller's fault rather than a numerical or
    /// verification failure.
    pub fn is_validation(&self) -> bool {
        !matches!(self, Error::Numerical(_) | Error::Verification(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
