//! `pwff-sim`: runs the instruct, reward and align phases for a list of
//! strategies and writes per-round metrics, checkpoints and comparison tables.

pub mod artifacts;
pub mod config;
pub mod report;
pub mod run;

pub use config::ExperimentConfig;
