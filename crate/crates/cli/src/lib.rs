//! Library side of the `hdrfuse` command: run configuration and the
//! subcommands, callable without spawning the binary.

pub mod commands;
pub mod config;
