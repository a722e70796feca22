//! Std side of the toolkit: files, parallel drivers, the demo pipeline and
//! the `lates` command line. All numerics live in `lates_core`.

pub mod cli;
pub mod compare;
pub mod io;
pub mod pipeline;
pub mod report;

use std::fmt;

pub use lates_core;

/// A request that cannot be satisfied as given (bad flag combination,
/// mismatched files). Maps to exit code 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UsageError(String);

impl UsageError {
    pub fn new(msg: impl Into<String>) -> Self {
        Self(msg.into())
    }
}

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub const EXIT_OK: u8 = 0;
pub const EXIT_USAGE: u8 = 1;
pub const EXIT_DATA: u8 = 2;
pub const EXIT_NUMERIC: u8 = 3;

/// Exit status for a failed command, from the first classifiable cause.
pub fn exit_code_for(err: &anyhow::Error) -> u8 {
    use lates_core::{Error, FormatError};
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return EXIT_USAGE;
        }
        let core = cause.downcast_ref::<Error>().or_else(|| match cause.downcast_ref::<FormatError>() {
            Some(FormatError::Invalid(e)) => Some(e),
            _ => None,
        });
        if let Some(e) = core {
            return match e {
                Error::NonFinite { .. } | Error::Undefined(_) => EXIT_NUMERIC,
                _ => EXIT_DATA,
            };
        }
    }
    EXIT_DATA
}
