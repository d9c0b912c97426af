//! Experiment driver for matrix-free sensor placement in weak-constraint
//! 4D-Var: configuration, orchestration of the numerical core, and result
//! files.

pub mod commands;
pub mod config;
pub mod error;
pub mod output;
pub mod record;

pub use commands::{run, Command, Outcome};
pub use config::{ExperimentConfig, Scale};
pub use error::{HarnessError, Result};
pub use record::ResultRecord;
