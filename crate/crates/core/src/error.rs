//! Error type shared by every fallible operation in the crate.
//!
//! Variants are grouped by how the command-line driver reports them:
//! configuration mistakes (exit code 2), data problems (exit code 3) and
//! numeric or internal-state failures (exit code 4).

use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration value or inconsistent settings.
    #[error("configuration error: {0}")]
    Config(String),

    /// Tensor or parameter shapes do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// An operation that needs at least one element received none.
    #[error("empty support: {0}")]
    EmptySupport(String),

    /// Input values outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// Input is technically valid but unusable (e.g. no valid pixels at all).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// Corrupt or inconsistent on-disk data.
    #[error("data error: {0}")]
    Data(String),

    /// Filesystem failure, with the offending path.
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A non-finite value appeared where finite math was required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// An API was driven through an invalid sequence of calls.
    #[error("state error: {0}")]
    State(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code the CLI maps this error to.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Shape(_) => 2,
            Error::EmptySupport(_)
            | Error::Domain(_)
            | Error::Degenerate(_)
            | Error::Data(_)
            | Error::Io { .. } => 3,
            Error::Numeric(_) | Error::State(_) => 4,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_reporting_contract() {
        assert_eq!(Error::Config("x".into()).exit_code(), 2);
        assert_eq!(Error::Shape("x".into()).exit_code(), 2);
        assert_eq!(Error::Data("x".into()).exit_code(), 3);
        assert_eq!(Error::Degenerate("x".into()).exit_code(), 3);
        assert_eq!(Error::Numeric("x".into()).exit_code(), 4);
        assert_eq!(Error::State("x".into()).exit_code(), 4);
    }
}
