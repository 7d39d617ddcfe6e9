//! Command surface of the `neurossm` binary.

pub mod commands;
pub mod error;
pub mod report;

pub use commands::Context;
pub use error::{CliError, CliResult};
