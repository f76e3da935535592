//! Orchestration of the simulation pipeline: configuration, cached
//! landscape sweeps, interaction scans with cMPS references, trace
//! analysis and calibration runs.

pub mod cache;
pub mod commands;
pub mod config;

pub use commands::{Failure, Outcome};
pub use config::RunConfig;
