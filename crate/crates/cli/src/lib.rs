//! Config schema and subcommand implementations for the `patchcast` binary.

pub mod commands;
pub mod config;
