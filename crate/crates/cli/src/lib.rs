//! Command line front end and HTTP service for `layoutcrop`.

pub mod cli;
pub mod service;

use std::fmt;

use layoutcrop::request::RequestError;

/// Exit code for unusable flags or malformed inputs.
pub const EXIT_BAD_INPUT: i32 = 2;
/// Exit code when no box of the requested ratio fits.
pub const EXIT_INFEASIBLE: i32 = 3;
pub const EXIT_IO: i32 = 4;

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn bad(message: impl Into<String>) -> Self {
        Self { code: EXIT_BAD_INPUT, message: message.into() }
    }

    pub fn io(message: impl Into<String>) -> Self {
        Self { code: EXIT_IO, message: message.into() }
    }

    pub fn infeasible(message: impl Into<String>) -> Self {
        Self { code: EXIT_INFEASIBLE, message: message.into() }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<RequestError> for CliError {
    fn from(e: RequestError) -> Self {
        match e {
            RequestError::BadRequest(m) => Self::bad(m),
            RequestError::Infeasible(m) => Self::infeasible(m),
            RequestError::Io(m) => Self::io(m),
        }
    }
}
