//! Process exit codes.

use std::fmt;

use v2m_core::Error;

pub const SUCCESS: i32 = 0;
pub const USAGE: i32 = 2;
pub const DATA: i32 = 3;
pub const NUMERIC: i32 = 4;

/// A request that cannot be honoured whatever the data says.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// A numerical check that did not hold.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckFailure(pub String);

impl fmt::Display for CheckFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for CheckFailure {}

/// Maps an error chain to 2 (usage), 3 (data) or 4 (numeric failure).
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return USAGE;
        }
        if cause.is::<CheckFailure>() {
            return NUMERIC;
        }
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Config(_) => USAGE,
                Error::NonFinite(_) | Error::Dimension { .. } => NUMERIC,
                _ => DATA,
            };
        }
    }
    DATA
}
