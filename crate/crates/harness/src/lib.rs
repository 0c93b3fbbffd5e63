//! Command-line harness: benchmark generation, pretraining, attribution,
//! unlearning runs and results tables.

pub mod cli;
pub mod config;
pub mod error;
pub mod pipeline;
pub mod report;

pub use config::{ExperimentConfig, InitConfig, ReportRow};
pub use error::{HarnessError, HarnessResult};

#[cfg(test)]
mod cli_tests;
