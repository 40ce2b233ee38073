//! Library half of the `hint` command-line tool, kept separate so the
//! subcommands can be driven from tests.

pub mod commands;
pub mod config;
pub mod manifest;

pub use config::RunConfig;
pub use manifest::RunManifest;
