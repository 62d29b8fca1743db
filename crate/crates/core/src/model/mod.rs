//! Transformer language model with adapter and LoRA injection, scalar
//! reward/critic scorers, parameter groups, and the checkpoint format.
//!
//! Placement: one adapter after the attention output and one after the MLP
//! output of every layer (`h + up(relu(down(h)))`), and LoRA on the query and
//! value projections (`W·x + (alpha/rank)·B·(A·x)`). Up-projections and `B`
//! are zero at insertion.

pub mod checkpoint;
mod encoder;
mod lm;
mod params;
mod score;

pub use encoder::{Arch, Batch, Binder};
pub use lm::{Generation, LanguageModel, ModelConfig, PeftPlan, Sampler};
pub use params::{FlatParams, Manifest, ManifestEntry, ParamEntry, ParamGroup, ParamId, ParamPartition, ParamSet};
pub use score::{ScoreBatch, ScoreConfig, ScoreModel};
