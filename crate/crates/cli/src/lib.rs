//! Experiment harness behind the `lyt` binary.

pub mod config;
pub mod error;
pub mod pipeline;
pub mod plot;
pub mod report;

pub use config::{ExperimentConfig, Overrides};
pub use error::{CliError, Result};
pub use pipeline::{Layout, Outcome, RunOptions};
