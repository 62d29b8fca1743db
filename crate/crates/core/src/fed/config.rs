use serde::{Deserialize, Serialize};

use super::aggregate::Scheme;
use crate::error::{PwffError, Result};

/// Stop after `max_rounds`, or earlier once the phase score has not improved
/// by more than `epsilon` (relative) over the last `patience` rounds.
/// `patience = 0` disables the early stop.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConvergenceCriterion {
    pub max_rounds: usize,
    pub patience: usize,
    pub epsilon: f64,
}

impl Default for ConvergenceCriterion {
    fn default() -> Self {
        Self { max_rounds: 20, patience: 0, epsilon: 1e-3 }
    }
}

impl ConvergenceCriterion {
    pub fn rounds(max_rounds: usize) -> Self {
        Self { max_rounds, ..Default::default() }
    }

    /// `scores` holds one value per completed round, higher is better.
    pub fn should_stop(&self, scores: &[f64]) -> bool {
        if scores.len() >= self.max_rounds {
            return true;
        }
        if self.patience == 0 || scores.len() <= self.patience {
            return false;
        }
        let split = scores.len() - self.patience;
        let before = scores[..split].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let recent = scores[split..].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        recent - before <= self.epsilon * before.abs().max(1e-12)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightOverride {
    pub client: usize,
    pub helpful: f64,
}

/// Population and data layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SetupConfig {
    pub n_clients: usize,
    pub n_samples: usize,
    /// Dirichlet concentration over task kinds.
    pub alpha: f64,
    /// Share of each client's shard held out for evaluation.
    pub eval_fraction: f64,
    /// LoRA ranks for strategies where clients choose their own.
    pub rank_choices: Vec<usize>,
    pub weight_overrides: Vec<WeightOverride>,
}

impl Default for SetupConfig {
    fn default() -> Self {
        Self {
            n_clients: 10,
            n_samples: 1200,
            alpha: 0.5,
            eval_fraction: 0.2,
            rank_choices: vec![4, 8, 16],
            weight_overrides: Vec::new(),
        }
    }
}

impl SetupConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_clients < 2 {
            return Err(PwffError::Config(format!("n_clients must be at least 2, got {}", self.n_clients)));
        }
        if !(0.0..1.0).contains(&self.eval_fraction) {
            return Err(PwffError::Config("eval_fraction must lie in [0, 1)".into()));
        }
        if self.rank_choices.is_empty() {
            return Err(PwffError::Config("rank_choices is empty".into()));
        }
        for o in &self.weight_overrides {
            if o.client >= self.n_clients || !(0.0..=1.0).contains(&o.helpful) {
                return Err(PwffError::Config(format!("invalid weight override {:?}", o)));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FedConfig {
    pub aggregation: Scheme,
    /// Also charge the broadcast of aggregated groups to each client.
    pub meter_downlink: bool,
}

impl Default for FedConfig {
    fn default() -> Self {
        Self { aggregation: Scheme::DataSize, meter_downlink: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InstructConfig {
    pub lr: f32,
    pub local_epochs: usize,
    pub batch_size: usize,
    /// Cap on optimizer steps per round; `0` means no cap.
    pub max_local_steps: usize,
    pub stop: ConvergenceCriterion,
}

impl Default for InstructConfig {
    fn default() -> Self {
        Self { lr: 1e-2, local_epochs: 1, batch_size: 16, max_local_steps: 0, stop: ConvergenceCriterion::rounds(30) }
    }
}
