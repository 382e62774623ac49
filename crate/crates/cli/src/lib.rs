//! Library side of the `ubna` command line: run configuration and the
//! subcommand implementations.

pub mod commands;
pub mod config;

/// A configuration or invocation problem, reported with exit code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}
