//! Command-line front end: run configuration, the subcommands, and the
//! self-test checks with their reference oracles.

pub mod checks;
pub mod commands;
pub mod config;
pub mod oracle;
