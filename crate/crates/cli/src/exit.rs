//! Process exit codes.
//!
//! 0 success, 1 configuration or usage error, 2 data error, 3 non-finite
//! loss during training.

use std::fmt;

pub const USAGE: u8 = 1;
pub const DATA: u8 = 2;
pub const NON_FINITE: u8 = 3;

/// An error with an explicit exit code.
#[derive(Debug)]
pub struct Coded {
    pub code: u8,
    message: String,
}

impl Coded {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: USAGE,
            message: message.into(),
        }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self {
            code: DATA,
            message: message.into(),
        }
    }
}

impl fmt::Display for Coded {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for Coded {}

pub fn config_error(e: impl fmt::Display) -> anyhow::Error {
    Coded::usage(e.to_string()).into()
}

pub fn data_error(e: impl fmt::Display) -> anyhow::Error {
    Coded::data(e.to_string()).into()
}

fn library_code(e: &flexitok::Error) -> u8 {
    use flexitok::Error::*;
    match e {
        Config(_) | MissingRateSpec(_) => USAGE,
        NonFinite { .. } => NON_FINITE,
        _ => DATA,
    }
}

/// Exit code for an error chain: the outermost explicit code wins, then the
/// library error kind; I/O and JSON failures count as data errors.
pub fn code_of(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(c) = cause.downcast_ref::<Coded>() {
            return c.code;
        }
        if let Some(e) = cause.downcast_ref::<flexitok::Error>() {
            return library_code(e);
        }
        if cause.is::<std::io::Error>() || cause.is::<serde_json::Error>() {
            return DATA;
        }
    }
    USAGE
}
