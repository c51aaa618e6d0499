//! Command-line driver: configuration files, run directories and the `rcs`
//! subcommands.

pub mod cli;
pub mod commands;
pub mod config;

pub use cli::run;
