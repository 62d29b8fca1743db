//! Federated protocol engine: per-strategy upload selection, weighted
//! aggregation, broadcast, and the synchronous round loop shared by all three
//! phases.

mod aggregate;
mod client;
mod config;
mod report;
mod run;
mod strategy;

pub use aggregate::{aggregate, broadcast, select_upload, Scheme, Upload};
pub use client::{evaluate_accuracy, local_sgd, ClientState, EvalSummary, PreferenceWeights};
pub use config::{ConvergenceCriterion, FedConfig, InstructConfig, SetupConfig, WeightOverride};
pub use report::{write_csv, ClientRound, RoundReport, CSV_HEADER};
pub use run::{Federation, Phase, Server, SimConfig};
pub use strategy::{RewardMode, Strategy, StrategyName};
