//! Command implementations behind the `kru` binary.

pub mod bench;
pub mod commands;

pub use commands::{CliError, Globals};
