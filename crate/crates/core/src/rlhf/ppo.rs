use log::warn;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::reward::{CriticPair, RewardModelPair};
use crate::autodiff::{Tape, Tensor};
use crate::error::{PwffError, Result};
use crate::fed::{ClientState, ConvergenceCriterion, Federation, Phase, RoundReport, Strategy};
use crate::model::{Batch, Binder, LanguageModel, ParamGroup, Sampler, ScoreBatch, ScoreModel};
use crate::optim::Adam;
use crate::rng::Rng;
use crate::tasks::{Objective, EOS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoConfig {
    pub clip_eps: f32,
    pub gamma: f32,
    pub gae_lambda: f32,
    pub kl_coeff: f32,
    pub rollout_batch: usize,
    pub ppo_epochs: usize,
    pub lr_policy: f32,
    pub lr_critic: f32,
    pub normalize_advantages: bool,
    pub max_new: usize,
    pub sampler: Sampler,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            clip_eps: 0.2,
            gamma: 1.0,
            gae_lambda: 0.95,
            kl_coeff: 0.02,
            rollout_batch: 32,
            ppo_epochs: 4,
            lr_policy: 1e-3,
            lr_critic: 1e-3,
            normalize_advantages: true,
            max_new: 6,
            sampler: Sampler::Temperature(1.0),
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return Err(PwffError::Config(format!("clip_eps must lie in (0, 1), got {}", self.clip_eps)));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(PwffError::Config(format!("gamma must lie in (0, 1], got {}", self.gamma)));
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return Err(PwffError::Config(format!("gae_lambda must lie in [0, 1], got {}", self.gae_lambda)));
        }
        if !(self.kl_coeff >= 0.0) {
            return Err(PwffError::Config(format!("kl_coeff must be nonnegative, got {}", self.kl_coeff)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlignConfig {
    pub ppo: PpoConfig,
    pub stop: ConvergenceCriterion,
}

/// The client's linear scalarization of the two objectives.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PersonalizedSignal {
    pub w_helpful: f32,
    pub w_harmless: f32,
}

impl PersonalizedSignal {
    pub fn new(w: (f64, f64)) -> Self {
        Self { w_helpful: w.0 as f32, w_harmless: w.1 as f32 }
    }

    pub fn immediate(&self, r_helpful: f32, r_harmless: f32) -> f32 {
        self.w_helpful * r_helpful + self.w_harmless * r_harmless
    }

    pub fn value(&self, v_helpful: f32, v_harmless: f32) -> f32 {
        self.w_helpful * v_helpful + self.w_harmless * v_harmless
    }
}

/// One sampled response. `actions` includes the end marker when it was drawn.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub prompt: Vec<usize>,
    pub actions: Vec<usize>,
    pub logprobs: Vec<f32>,
    pub ref_logprobs: Vec<f32>,
    pub r_helpful: f32,
    pub r_harmless: f32,
}

impl Trajectory {
    pub fn response(&self) -> &[usize] {
        match self.actions.last() {
            Some(&EOS) => &self.actions[..self.actions.len() - 1],
            _ => &self.actions,
        }
    }

    /// Per-step KL penalty `-kl_coeff (logp - ref_logp)`.
    pub fn kl_rewards(&self, kl_coeff: f32) -> Vec<f32> {
        self.logprobs.iter().zip(&self.ref_logprobs).map(|(lp, rp)| -kl_coeff * (lp - rp)).collect()
    }

    /// Step rewards with `terminal` added at the last step.
    pub fn step_rewards(&self, terminal: f32, kl_coeff: f32) -> Vec<f32> {
        let mut r = if kl_coeff == 0.0 { vec![0.0; self.actions.len()] } else { self.kl_rewards(kl_coeff) };
        if let Some(last) = r.last_mut() {
            *last += terminal;
        }
        r
    }
}

/// Log-probability of every continuation token, for several sequences in one
/// packed pass.
pub fn sequence_logprobs(model: &LanguageModel, items: &[(&[usize], &[usize])]) -> Result<Vec<Vec<f32>>> {
    if items.is_empty() {
        return Ok(Vec::new());
    }
    let (batch, picks) = action_batch(items);
    let mut tape = Tape::<f32>::new();
    let mut bind = Binder::new(model.params(), &[]);
    let logits = model.forward(&mut tape, &mut bind, &batch)?;
    let lp = tape.log_softmax_pick(logits, &picks)?;
    Ok(split(tape.value(lp).data(), items.iter().map(|(_, a)| a.len())))
}

/// Inputs `prompt ++ actions[..T-1]` and the `(row, token)` pick of each action.
fn action_batch(items: &[(&[usize], &[usize])]) -> (Batch, Vec<(usize, usize)>) {
    let seqs: Vec<Vec<usize>> =
        items.iter().map(|(p, a)| p.iter().chain(&a[..a.len() - 1]).copied().collect()).collect();
    let batch = Batch::new(&seqs);
    let mut picks = Vec::new();
    for ((p, a), seg) in items.iter().zip(&batch.segs) {
        for (t, &tok) in a.iter().enumerate() {
            picks.push((seg.start + p.len() - 1 + t, tok));
        }
    }
    (batch, picks)
}

fn split(flat: &[f32], lens: impl Iterator<Item = usize>) -> Vec<Vec<f32>> {
    let mut out = Vec::new();
    let mut off = 0;
    for n in lens {
        out.push(flat[off..off + n].to_vec());
        off += n;
    }
    out
}

/// Sample one response per prompt and score it. Trajectories with no actions
/// are dropped.
pub fn rollout(
    policy: &LanguageModel,
    reference: &LanguageModel,
    rms: &RewardModelPair,
    prompts: &[Vec<usize>],
    cfg: &PpoConfig,
    rng: &mut Rng,
) -> Result<Vec<Trajectory>> {
    let gens = policy.generate_batch(prompts, cfg.max_new, cfg.sampler, Some(EOS), rng)?;
    let kept: Vec<(usize, Vec<usize>)> =
        gens.into_iter().enumerate().filter(|(_, g)| !g.tokens.is_empty()).map(|(i, g)| (i, g.tokens)).collect();
    if kept.is_empty() {
        return Ok(Vec::new());
    }
    let items: Vec<(&[usize], &[usize])> = kept.iter().map(|(i, a)| (&prompts[*i][..], &a[..])).collect();
    let logprobs = sequence_logprobs(policy, &items)?;
    let ref_logprobs = sequence_logprobs(reference, &items)?;
    let mut trajs: Vec<Trajectory> = kept
        .iter()
        .zip(logprobs.into_iter().zip(ref_logprobs))
        .map(|((i, a), (lp, rp))| Trajectory {
            prompt: prompts[*i].clone(),
            actions: a.clone(),
            logprobs: lp,
            ref_logprobs: rp,
            r_helpful: 0.0,
            r_harmless: 0.0,
        })
        .collect();
    let scored: Vec<(&[usize], &[usize])> = trajs.iter().map(|t| (&t.prompt[..], t.response())).collect();
    let h = rms.helpful.score_batch(&scored)?;
    let x = rms.harmless.score_batch(&scored)?;
    for (t, (h, x)) in trajs.iter_mut().zip(h.into_iter().zip(x)) {
        t.r_helpful = h;
        t.r_harmless = x;
    }
    Ok(trajs)
}

/// Generalized advantage estimation. `values` has one entry per step plus the
/// bootstrap value of the final state. Returns `(advantages, returns)`.
pub fn gae_advantages(rewards: &[f32], values: &[f32], gamma: f32, lambda: f32) -> Result<(Vec<f32>, Vec<f32>)> {
    if values.len() != rewards.len() + 1 {
        return Err(PwffError::Contract(format!(
            "GAE needs {} values for {} rewards, got {}",
            rewards.len() + 1,
            rewards.len(),
            values.len()
        )));
    }
    let (g, l) = (gamma as f64, lambda as f64);
    let mut adv = vec![0f32; rewards.len()];
    let mut acc = 0f64;
    for t in (0..rewards.len()).rev() {
        let delta = rewards[t] as f64 + g * values[t + 1] as f64 - values[t] as f64;
        acc = delta + g * l * acc;
        adv[t] = acc as f32;
    }
    let ret = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, ret))
}

/// Shift to mean 0 and scale to unit standard deviation.
pub fn normalize_advantages(adv: &mut [f32]) {
    if adv.is_empty() {
        return;
    }
    let n = adv.len() as f64;
    let mean = adv.iter().map(|&a| a as f64).sum::<f64>() / n;
    let var = adv.iter().map(|&a| (a as f64 - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt() + 1e-8;
    for a in adv {
        *a = ((*a as f64 - mean) / std) as f32;
    }
}

/// Per-token clipped PPO objective.
pub fn clipped_surrogate(ratio: f64, advantage: f64, eps: f64) -> f64 {
    (ratio * advantage).min(ratio.clamp(1.0 - eps, 1.0 + eps) * advantage)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PpoStats {
    pub policy_loss: f32,
    pub critic_loss: [f32; 2],
    pub tokens: usize,
    /// Set when the update was abandoned and parameters were left untouched.
    pub aborted: Option<String>,
}

fn state_values(critic: &ScoreModel, trajs: &[Trajectory]) -> Result<Vec<Vec<f32>>> {
    let (batch, rows) = state_batch(critic, trajs);
    let mut tape = Tape::<f32>::new();
    let mut bind = Binder::new(critic.params(), &[]);
    let s = critic.forward_prefix_scores(&mut tape, &mut bind, &batch)?;
    let v = tape.value(s).data();
    Ok(split(&rows.iter().map(|&r| v[r]).collect::<Vec<_>>(), trajs.iter().map(|t| t.actions.len())))
}

/// Packed `prompt ++ actions[..T-1]` and the row that holds each state's
/// running-mean score.
fn state_batch(critic: &ScoreModel, trajs: &[Trajectory]) -> (ScoreBatch, Vec<usize>) {
    let items: Vec<(&[usize], &[usize])> =
        trajs.iter().map(|t| (&t.prompt[..], &t.actions[..t.actions.len() - 1])).collect();
    let batch = critic.batch(&items);
    let mut rows = Vec::new();
    for (t, seg) in trajs.iter().zip(&batch.batch.segs) {
        for s in 0..t.actions.len() {
            rows.push(seg.start + t.prompt.len() - 1 + s);
        }
    }
    (batch, rows)
}

fn with_bootstrap(v: &[f32]) -> Vec<f32> {
    let mut out = v.to_vec();
    out.push(0.0);
    out
}

fn critic_step(critic: &mut ScoreModel, opt: &mut Adam, trajs: &[Trajectory], targets: &[f32], lr: f32) -> Result<f32> {
    let (batch, rows) = state_batch(critic, trajs);
    let group = [ParamGroup::CriticHead];
    let mut tape = Tape::<f32>::new();
    let mut bind = Binder::new(critic.params(), &group);
    let s = critic.forward_prefix_scores(&mut tape, &mut bind, &batch)?;
    let v = tape.gather_rows(s, &rows)?;
    let target = tape.constant(Tensor::new(vec![rows.len(), 1], targets.to_vec())?);
    let d = tape.sub(v, target)?;
    let sq = tape.mul(d, d)?;
    let loss = tape.mean(sq)?;
    let value = tape.value(loss).item();
    let g = tape.backward(loss)?;
    let grads = bind.grads(&g);
    opt.apply(critic.params_mut(), &grads, lr);
    Ok(value)
}

fn policy_step(
    policy: &mut LanguageModel,
    opt: &mut Adam,
    trajs: &[Trajectory],
    adv: &[f32],
    cfg: &PpoConfig,
) -> Result<f32> {
    let items: Vec<(&[usize], &[usize])> = trajs.iter().map(|t| (&t.prompt[..], &t.actions[..])).collect();
    let (batch, picks) = action_batch(&items);
    let old: Vec<f32> = trajs.iter().flat_map(|t| t.logprobs.iter().copied()).collect();
    let n = old.len();
    let groups = policy.trainable_groups();
    let mut tape = Tape::<f32>::new();
    let mut bind = Binder::new(policy.params(), &groups);
    let logits = policy.forward(&mut tape, &mut bind, &batch)?;
    let lp = tape.log_softmax_pick(logits, &picks)?;
    let old = tape.constant(Tensor::new(vec![n], old)?);
    let a = tape.constant(Tensor::new(vec![n], adv.to_vec())?);
    let diff = tape.sub(lp, old)?;
    let ratio = tape.exp(diff)?;
    let unclipped = tape.mul(ratio, a)?;
    let clipped = tape.clamp(ratio, 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps)?;
    let clipped = tape.mul(clipped, a)?;
    let surr = tape.minimum(unclipped, clipped)?;
    let m = tape.mean(surr)?;
    let loss = tape.scale(m, -1.0)?;
    let value = tape.value(loss).item();
    let g = tape.backward(loss)?;
    let grads = bind.grads(&g);
    opt.apply(policy.params_mut(), &grads, cfg.lr_policy);
    Ok(value)
}

/// Clipped PPO on the policy's trainable groups plus separate value regression
/// for each critic. The policy sees only the personalized signal; each critic
/// sees only its own objective. Reward models are not touched.
#[allow(clippy::too_many_arguments)]
pub fn ppo_update(
    policy: &mut LanguageModel,
    opt: &mut Adam,
    critics: &mut CriticPair,
    critic_opts: &mut [Adam; 2],
    trajs: &[Trajectory],
    signal: PersonalizedSignal,
    cfg: &PpoConfig,
) -> Result<PpoStats> {
    if trajs.is_empty() {
        return Ok(PpoStats::default());
    }
    let vh = state_values(&critics.helpful, trajs)?;
    let vx = state_values(&critics.harmless, trajs)?;
    let mut adv = Vec::new();
    let mut targets = [Vec::new(), Vec::new()];
    for (k, t) in trajs.iter().enumerate() {
        let values: Vec<f32> = vh[k].iter().zip(&vx[k]).map(|(&h, &x)| signal.value(h, x)).collect();
        let rewards = t.step_rewards(signal.immediate(t.r_helpful, t.r_harmless), cfg.kl_coeff);
        adv.extend(gae_advantages(&rewards, &with_bootstrap(&values), cfg.gamma, cfg.gae_lambda)?.0);
        for (o, (v, r)) in [(&vh[k], t.r_helpful), (&vx[k], t.r_harmless)].into_iter().enumerate() {
            let own = t.step_rewards(r, 0.0);
            targets[o].extend(gae_advantages(&own, &with_bootstrap(v), cfg.gamma, cfg.gae_lambda)?.1);
        }
    }
    if cfg.normalize_advantages {
        normalize_advantages(&mut adv);
    }
    let saved = (policy.params().clone(), critics.clone(), opt.clone(), critic_opts.clone());
    let mut stats = PpoStats { tokens: adv.len(), ..Default::default() };
    let mut run = || -> Result<()> {
        for _ in 0..cfg.ppo_epochs {
            stats.policy_loss = policy_step(policy, opt, trajs, &adv, cfg)?;
            for (k, o) in [Objective::Helpful, Objective::Harmless].into_iter().enumerate() {
                stats.critic_loss[k] =
                    critic_step(critics.get_mut(o), &mut critic_opts[k], trajs, &targets[k], cfg.lr_critic)?;
            }
        }
        Ok(())
    };
    match run() {
        Ok(()) => Ok(stats),
        Err(PwffError::NonFinite(op)) => {
            *policy.params_mut() = saved.0;
            *critics = saved.1;
            *opt = saved.2;
            *critic_opts = saved.3;
            stats.aborted = Some(format!("non-finite value in {} after {} tokens", op, stats.tokens));
            Ok(stats)
        }
        Err(e) => Err(e),
    }
}

/// Rollout and PPO update for one client.
pub fn local_align_round(
    client: &mut ClientState,
    strategy: &Strategy,
    cfg: &AlignConfig,
    rng: &mut Rng,
) -> Result<Option<f32>> {
    if client.train.is_empty() {
        warn!("client {} has no prompts and skips this round", client.id);
        return Ok(None);
    }
    let rms = client.reward.as_ref().ok_or_else(|| PwffError::Phase("client has no reward models".into()))?;
    let reference =
        client.reference.as_ref().ok_or_else(|| PwffError::Phase("client has no reference policy".into()))?;
    let critics = client.critics.as_mut().ok_or_else(|| PwffError::Phase("client has no critics".into()))?;
    let prompts: Vec<Vec<usize>> =
        (0..cfg.ppo.rollout_batch).map(|_| client.train[rng.gen_range(0..client.train.len())].prompt.clone()).collect();
    let trajs = rollout(&client.model, reference, rms, &prompts, &cfg.ppo, rng)?;
    if trajs.is_empty() {
        return Ok(None);
    }
    let w = strategy.effective_weights((client.weights.helpful, client.weights.harmless));
    let stats = ppo_update(
        &mut client.model,
        &mut client.opt,
        critics,
        &mut client.critic_opts,
        &trajs,
        PersonalizedSignal::new(w),
        &cfg.ppo,
    )?;
    if let Some(why) = stats.aborted {
        warn!("client {}: PPO update aborted: {}", client.id, why);
        return Ok(None);
    }
    Ok(Some(stats.policy_loss))
}

/// Run the alignment phase.
pub fn align_federated(fed: &mut Federation) -> Result<Vec<RoundReport>> {
    fed.run_phase(Phase::Align)
}
