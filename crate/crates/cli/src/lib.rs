//! Configuration, checkpointing and subcommands behind the `mfresnet` binary.
//!
//! Exit codes: 0 success or passing check, 1 failed check, 2 configuration
//! or precondition error, 3 numeric failure.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;

pub use checkpoint::Checkpoint;
pub use commands::{DiagKind, Outcome};
pub use config::RunConfig;
pub use error::CliError;
