use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::PwffError;
use crate::model::ParamGroup;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum StrategyName {
    #[serde(rename = "PWFF")]
    Pwff,
    #[serde(rename = "VanillaFL")]
    VanillaFl,
    #[serde(rename = "FedAda")]
    FedAda,
    #[serde(rename = "FedLoRA")]
    FedLora,
    #[serde(rename = "SFL")]
    Sfl,
    #[serde(rename = "PFL_Full")]
    PflFull,
    #[serde(rename = "Shepherd")]
    Shepherd,
}

impl StrategyName {
    pub const ALL: [StrategyName; 7] = [
        StrategyName::Pwff,
        StrategyName::VanillaFl,
        StrategyName::FedAda,
        StrategyName::FedLora,
        StrategyName::Sfl,
        StrategyName::PflFull,
        StrategyName::Shepherd,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StrategyName::Pwff => "PWFF",
            StrategyName::VanillaFl => "VanillaFL",
            StrategyName::FedAda => "FedAda",
            StrategyName::FedLora => "FedLoRA",
            StrategyName::Sfl => "SFL",
            StrategyName::PflFull => "PFL_Full",
            StrategyName::Shepherd => "Shepherd",
        }
    }
}

impl fmt::Display for StrategyName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StrategyName {
    type Err = PwffError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|n| n.as_str() == s.trim())
            .ok_or_else(|| PwffError::Config(format!("unknown strategy {:?}", s)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardMode {
    Dual,
    SingleHelpful,
}

/// Which PEFT modules a strategy uses and which groups it sends and averages.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Strategy {
    pub name: StrategyName,
    pub adapters: bool,
    pub lora: bool,
    pub upload_groups: Vec<ParamGroup>,
    pub aggregate_groups: Vec<ParamGroup>,
    pub reward_mode: RewardMode,
    /// Clients pick their own LoRA rank. Only possible when LoRA is never
    /// averaged, since averaging needs one shared shape.
    pub personal_rank: bool,
}

impl Strategy {
    pub fn of(name: StrategyName) -> Self {
        use ParamGroup::{Adapter, Lora};
        let (adapters, lora, groups, reward_mode, personal_rank) = match name {
            StrategyName::Pwff => (true, true, vec![Adapter], RewardMode::Dual, true),
            StrategyName::VanillaFl | StrategyName::PflFull => {
                (true, true, vec![Adapter, Lora], RewardMode::Dual, false)
            }
            StrategyName::FedAda => (true, false, vec![Adapter], RewardMode::Dual, false),
            StrategyName::FedLora => (false, true, vec![Lora], RewardMode::Dual, false),
            StrategyName::Sfl => (true, true, vec![Adapter], RewardMode::SingleHelpful, true),
            StrategyName::Shepherd => (false, true, vec![Lora], RewardMode::SingleHelpful, false),
        };
        Self {
            name,
            adapters,
            lora,
            upload_groups: groups.clone(),
            aggregate_groups: groups,
            reward_mode,
            personal_rank,
        }
    }

    /// The preference weights a client actually optimizes.
    pub fn effective_weights(&self, w: (f64, f64)) -> (f64, f64) {
        match self.reward_mode {
            RewardMode::Dual => w,
            RewardMode::SingleHelpful => (1.0, 0.0),
        }
    }
}
