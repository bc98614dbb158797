//! Subcommand implementations behind the `cgreid` binary.

pub mod commands;
pub mod config;

pub use config::RunConfig;
