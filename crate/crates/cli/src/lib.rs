//! Run configuration shared by the `bertjam` binary and its tests.

pub mod config;

pub use config::{parse_list, RunConfig, KEYS};

/// A configuration or command-line mistake (exit code 1).
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}
