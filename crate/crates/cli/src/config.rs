//! Experiment file schema.
//!
//! A TOML document with three required top-level keys and optional tables
//! that mirror the simulator's configuration sections:
//!
//! ```toml
//! seed = 1
//! n_clients = 10
//! strategies = ["PWFF", "VanillaFL"]
//!
//! [setup]      # n_samples, alpha, eval_fraction, rank_choices, weight_overrides
//! [model]      # vocab_size, d_model, n_layers, n_heads, d_ff, max_seq_len, adapter_bottleneck, lora_rank, lora_alpha
//! [score]      # reward/critic scorer size
//! [tasks]      # payload bounds, kind mix, forbidden set size, harmful prompt rate
//! [channel]    # snr_db, bandwidth_hz, tx_power_w, fading, rate_mode, fading_seed
//! [fed]        # aggregation, meter_downlink
//! [instruct]   # lr, local_epochs, batch_size, max_local_steps, stop
//! [reward]     # preference data and reward-model training
//! [align]      # ppo, stop
//! ```
//!
//! Unknown keys anywhere are rejected.

use std::path::Path;

use pwff_core::channel::ChannelConfig;
use pwff_core::fed::{FedConfig, InstructConfig, SetupConfig, SimConfig, StrategyName, WeightOverride};
use pwff_core::model::{ModelConfig, ScoreConfig};
use pwff_core::rlhf::{AlignConfig, RewardConfig};
use pwff_core::tasks::TaskConfig;
use serde::{Deserialize, Serialize};

/// `[setup]` without the population size, which lives at the top level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Setup {
    pub n_samples: usize,
    pub alpha: f64,
    pub eval_fraction: f64,
    pub rank_choices: Vec<usize>,
    pub weight_overrides: Vec<WeightOverride>,
}

impl Default for Setup {
    fn default() -> Self {
        let s = SetupConfig::default();
        Self {
            n_samples: s.n_samples,
            alpha: s.alpha,
            eval_fraction: s.eval_fraction,
            rank_choices: s.rank_choices,
            weight_overrides: s.weight_overrides,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub n_clients: usize,
    pub strategies: Vec<StrategyName>,
    #[serde(default)]
    pub setup: Setup,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub score: ScoreConfig,
    #[serde(default)]
    pub tasks: TaskConfig,
    #[serde(default)]
    pub channel: ChannelConfig,
    #[serde(default)]
    pub fed: FedConfig,
    #[serde(default)]
    pub instruct: InstructConfig,
    #[serde(default)]
    pub reward: RewardConfig,
    #[serde(default)]
    pub align: AlignConfig,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read {}: {}", path.display(), e))?;
        Self::parse(&text).map_err(|e| format!("{}: {}", path.display(), e))
    }

    pub fn sim(&self) -> SimConfig {
        SimConfig {
            model: self.model.clone(),
            score: self.score.clone(),
            tasks: self.tasks.clone(),
            channel: self.channel.clone(),
            setup: SetupConfig {
                n_clients: self.n_clients,
                n_samples: self.setup.n_samples,
                alpha: self.setup.alpha,
                eval_fraction: self.setup.eval_fraction,
                rank_choices: self.setup.rank_choices.clone(),
                weight_overrides: self.setup.weight_overrides.clone(),
            },
            fed: self.fed.clone(),
            instruct: self.instruct.clone(),
            reward: self.reward.clone(),
            align: self.align.clone(),
        }
    }

    /// Checks everything a phase would otherwise reject later.
    pub fn validate(&self) -> Result<(), String> {
        if self.strategies.is_empty() {
            return Err("strategies: at least one strategy is required".into());
        }
        for (i, s) in self.strategies.iter().enumerate() {
            if self.strategies[..i].contains(s) {
                return Err(format!("strategies: {} is listed twice", s));
            }
        }
        if let Some(o) = self.setup.weight_overrides.iter().find(|o| o.client >= self.n_clients) {
            return Err(format!("setup.weight_overrides: client {} does not exist", o.client));
        }
        self.sim().validate().map_err(|e| e.to_string())
    }

    /// Snapshot written next to the artifacts; parses back to `self`.
    pub fn resolved(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
