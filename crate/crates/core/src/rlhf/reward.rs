use log::warn;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{PwffError, Result};
use crate::fed::{ClientState, ConvergenceCriterion, Federation, Phase, RoundReport};
use crate::model::{Arch, Binder, ParamGroup, ParamId, ScoreModel};
use crate::rng::{derive_seed, Rng};
use crate::tasks::{
    gen_dataset, gen_preferences, kind_histogram, Objective, PreferenceConfig, PreferencePair, TaskConfig, TaskMix,
    VocabPolicy,
};

#[derive(Clone, Debug)]
pub struct RewardModelPair {
    pub helpful: ScoreModel,
    pub harmless: ScoreModel,
}

impl RewardModelPair {
    /// Two untrained scorers with zero heads.
    pub fn new(arch: &Arch, seed: u64) -> Result<Self> {
        Ok(Self {
            helpful: ScoreModel::new(arch.clone(), ParamGroup::RewardHead, derive_seed(seed, "rm", 0))?,
            harmless: ScoreModel::new(arch.clone(), ParamGroup::RewardHead, derive_seed(seed, "rm", 1))?,
        })
    }

    pub fn get(&self, o: Objective) -> &ScoreModel {
        match o {
            Objective::Helpful => &self.helpful,
            Objective::Harmless => &self.harmless,
        }
    }

    pub fn get_mut(&mut self, o: Objective) -> &mut ScoreModel {
        match o {
            Objective::Helpful => &mut self.helpful,
            Objective::Harmless => &mut self.harmless,
        }
    }

    /// Bitwise fingerprint of both models.
    pub fn hash(&self) -> (u64, u64) {
        (self.helpful.params().hash(&ParamGroup::ALL), self.harmless.params().hash(&ParamGroup::ALL))
    }
}

/// Per-objective value models, initialized from the reward models.
#[derive(Clone, Debug)]
pub struct CriticPair {
    pub helpful: ScoreModel,
    pub harmless: ScoreModel,
}

impl CriticPair {
    pub fn from_rewards(rms: &RewardModelPair) -> Self {
        Self {
            helpful: rms.helpful.regrouped(ParamGroup::CriticHead),
            harmless: rms.harmless.regrouped(ParamGroup::CriticHead),
        }
    }

    pub fn get(&self, o: Objective) -> &ScoreModel {
        match o {
            Objective::Helpful => &self.helpful,
            Objective::Harmless => &self.harmless,
        }
    }

    pub fn get_mut(&mut self, o: Objective) -> &mut ScoreModel {
        match o {
            Objective::Helpful => &mut self.helpful,
            Objective::Harmless => &mut self.harmless,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardConfig {
    pub pairs_per_client: usize,
    pub holdout_pairs_per_client: usize,
    pub lr: f32,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub preferences: PreferenceConfig,
    pub stop: ConvergenceCriterion,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            pairs_per_client: 600,
            holdout_pairs_per_client: 16,
            lr: 3e-3,
            local_epochs: 1,
            batch_size: 16,
            preferences: PreferenceConfig::default(),
            stop: ConvergenceCriterion::rounds(25),
        }
    }
}

/// A client's oracle-labeled pairs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PreferenceSets {
    pub helpful: Vec<PreferencePair>,
    pub harmless: Vec<PreferencePair>,
    pub holdout: Vec<PreferencePair>,
}

impl PreferenceSets {
    pub fn train(&self, o: Objective) -> &[PreferencePair] {
        match o {
            Objective::Helpful => &self.helpful,
            Objective::Harmless => &self.harmless,
        }
    }
}

fn pairs_or_empty(r: Result<Vec<PreferencePair>>, client: usize) -> Result<Vec<PreferencePair>> {
    match r {
        Err(PwffError::DegeneratePolicy(msg)) => {
            warn!("client {}: {}", client, msg);
            Ok(Vec::new())
        }
        other => other,
    }
}

/// Sample and label pairs with the client's current policy. Training pairs
/// use fresh prompts drawn from the client's own task-kind mix; held-out pairs
/// use its eval prompts.
pub fn gen_preference_sets(
    client: &ClientState,
    objectives: &[Objective],
    cfg: &RewardConfig,
    tasks: &TaskConfig,
    policy: &VocabPolicy,
    seed: u64,
) -> Result<PreferenceSets> {
    let mut sets = PreferenceSets::default();
    let [copy, reverse, sort] = kind_histogram(&client.train);
    let local = TaskConfig { mix: TaskMix { copy, reverse, sort }, ..tasks.clone() };
    for &o in objectives {
        if !client.train.is_empty() && cfg.pairs_per_client > 0 {
            let prompts = gen_dataset(derive_seed(seed, "prompts", o as u64), cfg.pairs_per_client, &local, policy)?;
            let r = gen_preferences(
                &client.model,
                &prompts,
                cfg.pairs_per_client,
                o,
                policy,
                &cfg.preferences,
                derive_seed(seed, "train", o as u64),
            );
            let pairs = pairs_or_empty(r, client.id)?;
            match o {
                Objective::Helpful => sets.helpful = pairs,
                Objective::Harmless => sets.harmless = pairs,
            }
        }
        if !client.eval.is_empty() && cfg.holdout_pairs_per_client > 0 {
            let r = gen_preferences(
                &client.model,
                &client.eval,
                cfg.holdout_pairs_per_client,
                o,
                policy,
                &cfg.preferences,
                derive_seed(seed, "holdout", o as u64),
            );
            sets.holdout.extend(pairs_or_empty(r, client.id)?);
        }
    }
    Ok(sets)
}

/// `-log sigmoid(gap)`, computed without overflow.
pub fn bradley_terry(gap: f64) -> f64 {
    if gap > 0.0 {
        (-gap).exp().ln_1p()
    } else {
        -gap + gap.exp().ln_1p()
    }
}

pub fn preference_loss(rm: &ScoreModel, pair: &PreferencePair) -> Result<f32> {
    let s = rm.score_batch(&[(&pair.prompt, &pair.chosen), (&pair.prompt, &pair.rejected)])?;
    Ok(bradley_terry(s[0] as f64 - s[1] as f64) as f32)
}

/// Mean Bradley-Terry loss over `pairs` and its gradient for every tensor of
/// the model's group.
pub fn preference_grads(rm: &ScoreModel, pairs: &[PreferencePair]) -> Result<(f32, Vec<(ParamId, Vec<f32>)>)> {
    if pairs.is_empty() {
        return Err(PwffError::Contract("no preference pairs".into()));
    }
    let n = pairs.len();
    let items: Vec<(&[usize], &[usize])> = pairs
        .iter()
        .map(|p| (&p.prompt[..], &p.chosen[..]))
        .chain(pairs.iter().map(|p| (&p.prompt[..], &p.rejected[..])))
        .collect();
    let group = [rm.group()];
    let mut tape = Tape::<f32>::new();
    let mut bind = Binder::new(rm.params(), &group);
    let s = rm.forward_scores(&mut tape, &mut bind, &rm.batch(&items))?;
    let c = tape.gather_rows(s, &(0..n).collect::<Vec<_>>())?;
    let r = tape.gather_rows(s, &(n..2 * n).collect::<Vec<_>>())?;
    let gap = tape.sub(c, r)?;
    let ls = tape.log_sigmoid(gap)?;
    let m = tape.mean(ls)?;
    let loss = tape.scale(m, -1.0)?;
    let value = tape.value(loss).item();
    let grads = tape.backward(loss)?;
    Ok((value, bind.grads(&grads)))
}

/// Share of pairs where the chosen response scores higher; ties count half.
pub fn ranking_accuracy(rm: &ScoreModel, pairs: &[PreferencePair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(PwffError::Contract("no preference pairs".into()));
    }
    let mut hits = 0.0;
    for chunk in pairs.chunks(64) {
        let items: Vec<(&[usize], &[usize])> =
            chunk.iter().flat_map(|p| [(&p.prompt[..], &p.chosen[..]), (&p.prompt[..], &p.rejected[..])]).collect();
        let s = rm.score_batch(&items)?;
        for k in 0..chunk.len() {
            hits += match s[2 * k].partial_cmp(&s[2 * k + 1]) {
                Some(std::cmp::Ordering::Greater) => 1.0,
                Some(std::cmp::Ordering::Equal) => 0.5,
                _ => 0.0,
            };
        }
    }
    Ok(hits / pairs.len() as f64)
}

/// Local Bradley-Terry epochs for every objective the client has pairs for.
pub fn local_reward_round(client: &mut ClientState, cfg: &RewardConfig, rng: &mut Rng) -> Result<Option<f32>> {
    let sets = client.preferences.as_ref().ok_or_else(|| PwffError::Phase("client has no preference data".into()))?;
    let rms = client.reward.as_mut().ok_or_else(|| PwffError::Phase("client has no reward models".into()))?;
    let mut losses = Vec::new();
    for (k, o) in [Objective::Helpful, Objective::Harmless].into_iter().enumerate() {
        let pairs = sets.train(o);
        if pairs.is_empty() {
            continue;
        }
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        for _ in 0..cfg.local_epochs {
            order.shuffle(rng);
            for chunk in order.chunks(cfg.batch_size.max(1)) {
                let batch: Vec<PreferencePair> = chunk.iter().map(|&i| pairs[i].clone()).collect();
                let (loss, grads) = preference_grads(rms.get(o), &batch)?;
                client.reward_opts[k].apply(rms.get_mut(o).params_mut(), &grads, cfg.lr);
                losses.push(loss as f64);
            }
        }
    }
    if losses.is_empty() {
        warn!("client {} has no preference pairs and skips this round", client.id);
        return Ok(None);
    }
    Ok(Some((losses.iter().sum::<f64>() / losses.len() as f64) as f32))
}

/// Run the reward phase and return the global reward models.
pub fn train_reward_federated(fed: &mut Federation) -> Result<(RewardModelPair, Vec<RoundReport>)> {
    let reports = fed.run_phase(Phase::Reward)?;
    let rms = fed.server.reward.clone().ok_or_else(|| PwffError::Phase("reward phase produced no models".into()))?;
    Ok((rms, reports))
}
