//! Configuration and commands behind the `prml` binary.

pub mod commands;
pub mod config;
