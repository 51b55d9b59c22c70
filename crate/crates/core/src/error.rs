use std::io;

use thiserror::Error;

/// Errors raised across the crate.
///
/// The variants map onto the CLI exit codes: contract and numeric-input
/// violations exit with 1, everything that touches the outside world
/// (files, sockets, remote captioners) exits with 2.
#[derive(Debug, Error)]
pub enum Error {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("non-finite or invalid numeric input: {0}")]
    NumericInput(String),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("corrupt data: {0}")]
    Corruption(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Contract(_) | Error::NumericInput(_) => 1,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

/// Shorthand for returning a contract violation.
macro_rules! contract {
    ($($arg:tt)*) => {
        return Err($crate::error::Error::Contract(format!($($arg)*)))
    };
}
pub(crate) use contract;
