//! Desk-scale simulator for personalized wireless federated fine-tuning of a
//! small language model: adapter and LoRA instruction tuning with partial
//! aggregation, federated reward learning with a helpfulness and a
//! harmlessness reward model, and multi-objective PPO alignment, with every
//! upload metered through a wireless channel cost model.

pub mod autodiff;
pub mod channel;
pub mod error;
pub mod fed;
pub mod model;
pub mod optim;
pub mod rlhf;
pub mod rng;
pub mod tasks;

pub use error::{PwffError, Result};
