//! Library half of the `twobp` binary, so the command layer can be tested
//! in-process.

pub mod commands;
pub mod config;
pub mod svg;

pub use commands::{run, Cli};
