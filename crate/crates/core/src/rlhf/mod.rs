//! Federated reward learning and multi-objective PPO alignment.
//!
//! Each client holds a helpfulness and a harmlessness reward model (shared and
//! averaged across clients) and a matching pair of critics (local). A client
//! optimizes the linear combination of the two reward streams given by its
//! preference weights; each critic is regressed on its own objective only.

mod ppo;
mod reward;

pub use ppo::{
    align_federated, clipped_surrogate, gae_advantages, local_align_round, normalize_advantages, ppo_update, rollout,
    sequence_logprobs, AlignConfig, PersonalizedSignal, PpoConfig, PpoStats, Trajectory,
};
pub use reward::{
    bradley_terry, gen_preference_sets, local_reward_round, preference_grads, preference_loss, ranking_accuracy,
    train_reward_federated, CriticPair, PreferenceSets, RewardConfig, RewardModelPair,
};
