use log::warn;
use rand::seq::SliceRandom;

use super::config::InstructConfig;
use crate::error::{PwffError, Result};
use crate::model::{LanguageModel, Sampler};
use crate::optim::{Adam, AdamConfig};
use crate::rlhf::{CriticPair, PreferenceSets, RewardModelPair};
use crate::rng::Rng;
use crate::tasks::{oracle_harmless, oracle_helpful, InstructionTask, VocabPolicy, EOS};

/// Helpfulness/harmlessness trade-off of one client.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PreferenceWeights {
    pub helpful: f64,
    pub harmless: f64,
}

impl PreferenceWeights {
    pub fn new(helpful: f64, harmless: f64) -> Result<Self> {
        if helpful < 0.0 || harmless < 0.0 || (helpful + harmless - 1.0).abs() > 1e-9 {
            return Err(PwffError::Config(format!(
                "preference weights ({}, {}) must be nonnegative and sum to 1",
                helpful, harmless
            )));
        }
        Ok(Self { helpful, harmless })
    }

    pub fn from_helpful(helpful: f64) -> Result<Self> {
        Self::new(helpful, 1.0 - helpful)
    }
}

pub struct ClientState {
    pub id: usize,
    pub train: Vec<InstructionTask>,
    pub eval: Vec<InstructionTask>,
    pub lora_rank: usize,
    pub weights: PreferenceWeights,
    pub model: LanguageModel,
    /// Frozen snapshot of the policy taken when alignment starts.
    pub reference: Option<LanguageModel>,
    pub reward: Option<RewardModelPair>,
    pub critics: Option<CriticPair>,
    pub preferences: Option<PreferenceSets>,
    pub opt: Adam,
    pub critic_opts: [Adam; 2],
    pub reward_opts: [Adam; 2],
}

impl ClientState {
    pub fn new(
        id: usize,
        train: Vec<InstructionTask>,
        eval: Vec<InstructionTask>,
        lora_rank: usize,
        weights: PreferenceWeights,
        model: LanguageModel,
    ) -> Self {
        Self {
            id,
            train,
            eval,
            lora_rank,
            weights,
            model,
            reference: None,
            reward: None,
            critics: None,
            preferences: None,
            opt: Adam::new(AdamConfig::default()),
            critic_opts: Default::default(),
            reward_opts: Default::default(),
        }
    }
}

/// Supervised epochs over the client's shard. Returns the mean batch loss, or
/// `None` when the shard is empty.
pub fn local_sgd(client: &mut ClientState, cfg: &InstructConfig, rng: &mut Rng) -> Result<Option<f32>> {
    if client.train.is_empty() {
        warn!("client {} has an empty shard and skips this round", client.id);
        return Ok(None);
    }
    if client.model.peft().is_none() {
        return Err(PwffError::Contract("local training needs PEFT modules".into()));
    }
    let bs = cfg.batch_size.max(1);
    let conts: Vec<Vec<usize>> = client.train.iter().map(|t| t.full_sequence()[t.prompt.len()..].to_vec()).collect();
    let mut order: Vec<usize> = (0..client.train.len()).collect();
    let mut losses = Vec::new();
    'epochs: for _ in 0..cfg.local_epochs {
        order.shuffle(rng);
        for chunk in order.chunks(bs) {
            if cfg.max_local_steps > 0 && losses.len() >= cfg.max_local_steps {
                break 'epochs;
            }
            let ex: Vec<(&[usize], &[usize])> =
                chunk.iter().map(|&i| (&client.train[i].prompt[..], &conts[i][..])).collect();
            let (loss, grads) = client.model.supervised_grads(&ex)?;
            client.opt.apply(client.model.params_mut(), &grads, cfg.lr);
            losses.push(loss as f64);
        }
    }
    if losses.is_empty() {
        return Ok(None);
    }
    Ok(Some((losses.iter().sum::<f64>() / losses.len() as f64) as f32))
}

/// Greedy-decoding quality of a model on a task set.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EvalSummary {
    pub n: usize,
    /// Mean helpfulness oracle score, reported as accuracy.
    pub helpful: f64,
    pub harmless: f64,
    /// Forbidden tokens over all emitted response tokens.
    pub forbidden_rate: f64,
}

pub fn evaluate_accuracy(
    model: &LanguageModel,
    tasks: &[InstructionTask],
    policy: &VocabPolicy,
) -> Result<EvalSummary> {
    if tasks.is_empty() {
        return Ok(EvalSummary::default());
    }
    let prompts: Vec<Vec<usize>> = tasks.iter().map(|t| t.prompt.clone()).collect();
    // greedy decoding never touches the stream
    let mut unused = crate::rng::stream(0, "greedy", 0);
    let max_new = model.arch().max_seq_len;
    let gens = model.generate_batch(&prompts, max_new, Sampler::Greedy, Some(EOS), &mut unused)?;
    let (mut h, mut x, mut bad, mut total) = (0.0, 0.0, 0usize, 0usize);
    for (t, g) in tasks.iter().zip(&gens) {
        let r = g.response(Some(EOS));
        h += oracle_helpful(t, r);
        x += oracle_harmless(r, policy);
        bad += r.iter().filter(|&&tok| policy.is_forbidden(tok)).count();
        total += r.len();
    }
    let n = tasks.len() as f64;
    Ok(EvalSummary {
        n: tasks.len(),
        helpful: h / n,
        harmless: x / n,
        forbidden_rate: if total == 0 { 0.0 } else { bad as f64 / total as f64 },
    })
}
