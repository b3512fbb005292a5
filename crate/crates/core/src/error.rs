//! Error taxonomy shared by every module.
//!
//! The variants map one-to-one onto the CLI exit-code contract:
//! usage/configuration problems, bad data, and numeric or state faults are
//! distinguishable by the caller without string matching.

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Shape or rank mismatch between tensors/images.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A hyperparameter or config value outside its legal range.
    #[error("configuration error: {0}")]
    Config(String),

    /// Bad or missing input data (files, labels, counts).
    #[error("data error: {0}")]
    Data(String),

    /// An operation invoked in an invalid state (e.g. optimizer step before
    /// backward, checkpoint/config mismatch).
    #[error("state error: {0}")]
    State(String),

    /// Non-finite values or other numeric faults during computation.
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Stable process exit code for scripting: 2 usage/config, 3 data,
    /// 4 numeric/state (io counts as data).
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Dimension(_) => 2,
            Error::Data(_) | Error::Io(_) => 3,
            Error::State(_) | Error::Numeric(_) => 4,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_are_stable() {
        assert_eq!(Error::Config("x".into()).exit_code(), 2);
        assert_eq!(Error::Dimension("x".into()).exit_code(), 2);
        assert_eq!(Error::Data("x".into()).exit_code(), 3);
        assert_eq!(Error::State("x".into()).exit_code(), 4);
        assert_eq!(Error::Numeric("x".into()).exit_code(), 4);
    }
}
