//! A federation small enough to run every phase in a second or two.

use pwff_core::fed::{ConvergenceCriterion, SimConfig};

pub fn tiny_sim(n_clients: usize) -> SimConfig {
    let mut cfg = SimConfig::default();
    cfg.setup.n_clients = n_clients;
    cfg.setup.n_samples = 20 * n_clients;
    cfg.instruct.stop = ConvergenceCriterion::rounds(2);
    cfg.reward.pairs_per_client = 8;
    cfg.reward.holdout_pairs_per_client = 4;
    cfg.reward.stop = ConvergenceCriterion::rounds(1);
    cfg.align.stop = ConvergenceCriterion::rounds(2);
    cfg.align.ppo.rollout_batch = 4;
    cfg.align.ppo.ppo_epochs = 1;
    cfg
}
