use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::aggregate::{aggregate, broadcast, select_upload, Upload};
use super::client::{evaluate_accuracy, local_sgd, ClientState, EvalSummary, PreferenceWeights};
use super::config::{ConvergenceCriterion, FedConfig, InstructConfig, SetupConfig};
use super::report::{ClientRound, RoundReport};
use super::strategy::{RewardMode, Strategy, StrategyName};
use crate::channel::{upload_cost, ChannelConfig, LinkCost};
use crate::error::{PwffError, Result};
use crate::model::{FlatParams, LanguageModel, ModelConfig, ParamGroup, ParamSet, PeftPlan, ScoreConfig};
use crate::rlhf::{self, AlignConfig, RewardConfig, RewardModelPair};
use crate::rng::{self, derive_seed};
use crate::tasks::{dirichlet_partition, gen_dataset, Objective, PreferencePair, TaskConfig, VocabPolicy};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Instruct,
    Reward,
    Align,
}

impl Phase {
    pub const ALL: [Phase; 3] = [Phase::Instruct, Phase::Reward, Phase::Align];

    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Instruct => "instruct",
            Phase::Reward => "reward",
            Phase::Align => "align",
        }
    }
}

/// Every knob of a simulation except the strategy and the master seed.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub model: ModelConfig,
    pub score: ScoreConfig,
    pub tasks: TaskConfig,
    pub channel: ChannelConfig,
    pub setup: SetupConfig,
    pub fed: FedConfig,
    pub instruct: InstructConfig,
    pub reward: RewardConfig,
    pub align: AlignConfig,
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.score.arch(self.model.vocab_size, self.model.max_seq_len).validate()?;
        self.tasks.validate(self.model.max_seq_len)?;
        self.channel.validate()?;
        self.setup.validate()?;
        self.align.ppo.validate()?;
        if let Some(&r) = self.setup.rank_choices.iter().find(|&&r| r == 0 || r > self.model.d_model) {
            return Err(PwffError::Config(format!("rank choice {} is outside 1..={}", r, self.model.d_model)));
        }
        Ok(())
    }
}

/// Server-side state carried between phases.
#[derive(Clone, Debug, Default)]
pub struct Server {
    pub completed: Vec<Phase>,
    pub reward: Option<RewardModelPair>,
    /// Held-out oracle-labeled pairs used to score the global reward models.
    pub holdout: Vec<PreferencePair>,
}

pub struct Federation {
    pub cfg: SimConfig,
    pub seed: u64,
    pub strategy: Strategy,
    pub policy: VocabPolicy,
    pub clients: Vec<ClientState>,
    pub server: Server,
}

fn key(round: usize, client: usize) -> u64 {
    ((round as u64) << 20) | client as u64
}

impl Federation {
    pub fn new(cfg: SimConfig, strategy: StrategyName, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let strategy = Strategy::of(strategy);
        let policy = VocabPolicy::standard(cfg.model.vocab_size, cfg.tasks.n_forbidden)?;
        let base = LanguageModel::new(&cfg.model, derive_seed(seed, "base", 0))?;
        let data = gen_dataset(derive_seed(seed, "data", 0), cfg.setup.n_samples, &cfg.tasks, &policy)?;
        let shards =
            dirichlet_partition(&data, cfg.setup.n_clients, cfg.setup.alpha, derive_seed(seed, "partition", 0))?;
        let mut clients = Vec::with_capacity(shards.len());
        for (id, mut shard) in shards.into_iter().enumerate() {
            shard.shuffle(&mut rng::stream(seed, "split", id as u64));
            let n_eval = ((shard.len() as f64) * cfg.setup.eval_fraction).round() as usize;
            let eval = shard[..n_eval].iter().map(|&i| data[i].clone()).collect();
            let train = shard[n_eval..].iter().map(|&i| data[i].clone()).collect();
            let helpful = match cfg.setup.weight_overrides.iter().find(|o| o.client == id) {
                Some(o) => o.helpful,
                None => rng::stream(seed, "weights", id as u64).gen::<f64>(),
            };
            let rank = if strategy.personal_rank {
                *cfg.setup.rank_choices.choose(&mut rng::stream(seed, "rank", id as u64)).unwrap()
            } else {
                cfg.model.lora_rank
            };
            let plan = PeftPlan {
                adapters: strategy.adapters,
                lora_rank: if strategy.lora { rank } else { 0 },
                ..cfg.model.peft()
            };
            let model = base.insert_peft(&plan, derive_seed(seed, "peft", id as u64))?;
            clients.push(ClientState::new(
                id,
                train,
                eval,
                plan.lora_rank,
                PreferenceWeights::from_helpful(helpful)?,
                model,
            ));
        }
        // Shared groups start from one common initialization.
        let init = clients[0].model.params().flatten(&strategy.aggregate_groups);
        broadcast(&init, clients.iter_mut().map(|c| c.model.params_mut()))?;
        Ok(Self { cfg, seed, strategy, policy, clients, server: Server::default() })
    }

    pub fn completed(&self, phase: Phase) -> bool {
        self.server.completed.contains(&phase)
    }

    /// Restore the state left by a finished instruct phase from each client's
    /// model weights, in client-id order.
    pub fn resume_instruct(&mut self, models: Vec<ParamSet>) -> Result<()> {
        if models.len() != self.clients.len() {
            return Err(PwffError::Protocol(format!(
                "{} client checkpoints for {} clients",
                models.len(),
                self.clients.len()
            )));
        }
        for (c, p) in self.clients.iter_mut().zip(models) {
            c.model.load(p).map_err(|e| PwffError::Protocol(format!("client {}: {}", c.id, e)))?;
        }
        self.mark(Phase::Instruct);
        Ok(())
    }

    /// Restore the global reward models left by a finished reward phase.
    pub fn resume_reward(&mut self, helpful: ParamSet, harmless: ParamSet) -> Result<()> {
        self.check_order(Phase::Reward)?;
        let arch = self.cfg.score.arch(self.cfg.model.vocab_size, self.cfg.model.max_seq_len);
        let mut rms = RewardModelPair::new(&arch, 0)?;
        rms.helpful.load(helpful)?;
        rms.harmless.load(harmless)?;
        self.server.reward = Some(rms);
        self.mark(Phase::Reward);
        Ok(())
    }

    fn mark(&mut self, phase: Phase) {
        if !self.server.completed.contains(&phase) {
            self.server.completed.push(phase);
        }
    }

    fn stop(&self, phase: Phase) -> ConvergenceCriterion {
        match phase {
            Phase::Instruct => self.cfg.instruct.stop.clone(),
            Phase::Reward => self.cfg.reward.stop.clone(),
            Phase::Align => self.cfg.align.stop.clone(),
        }
    }

    fn objectives(&self) -> Vec<Objective> {
        match self.strategy.reward_mode {
            RewardMode::Dual => vec![Objective::Helpful, Objective::Harmless],
            RewardMode::SingleHelpful => vec![Objective::Helpful],
        }
    }

    fn check_order(&self, phase: Phase) -> Result<()> {
        let need = match phase {
            Phase::Instruct => None,
            Phase::Reward => Some(Phase::Instruct),
            Phase::Align => Some(Phase::Reward),
        };
        match need {
            Some(p) if !self.completed(p) => Err(PwffError::Contract(format!(
                "the {} phase needs the {} phase to finish first",
                phase.as_str(),
                p.as_str()
            ))),
            _ => Ok(()),
        }
    }

    fn prepare(&mut self, phase: Phase) -> Result<()> {
        match phase {
            Phase::Instruct => {
                for c in &mut self.clients {
                    c.opt = Default::default();
                }
            }
            Phase::Reward => {
                let arch = self.cfg.score.arch(self.cfg.model.vocab_size, self.cfg.model.max_seq_len);
                let init = RewardModelPair::new(&arch, derive_seed(self.seed, "rm-init", 0))?;
                let objectives = self.objectives();
                self.server.holdout.clear();
                for c in &mut self.clients {
                    let sets = rlhf::gen_preference_sets(
                        c,
                        &objectives,
                        &self.cfg.reward,
                        &self.cfg.tasks,
                        &self.policy,
                        derive_seed(self.seed, "prefs", c.id as u64),
                    )?;
                    self.server.holdout.extend(sets.holdout.iter().cloned());
                    c.preferences = Some(sets);
                    c.reward = Some(init.clone());
                    c.reward_opts = Default::default();
                }
                self.server.reward = Some(init);
            }
            Phase::Align => {
                let global = self
                    .server
                    .reward
                    .clone()
                    .ok_or_else(|| PwffError::Phase("alignment needs trained reward models".into()))?;
                for c in &mut self.clients {
                    c.reward = Some(global.clone());
                    c.critics = Some(rlhf::CriticPair::from_rewards(&global));
                    c.reference = Some(c.model.clone());
                    c.opt = Default::default();
                    c.critic_opts = Default::default();
                }
            }
        }
        Ok(())
    }

    /// Greedy evaluation of every client on its held-out tasks.
    pub fn evaluate(&self) -> Result<Vec<EvalSummary>> {
        self.clients.iter().map(|c| evaluate_accuracy(&c.model, &c.eval, &self.policy)).collect()
    }

    /// Eval-size weighted mean of a per-client metric.
    pub fn global_mean(evals: &[EvalSummary], f: impl Fn(&EvalSummary) -> f64) -> f64 {
        let n: usize = evals.iter().map(|e| e.n).sum();
        if n == 0 {
            return 0.0;
        }
        evals.iter().map(|e| f(e) * e.n as f64).sum::<f64>() / n as f64
    }

    /// Pairwise ranking accuracy of the server's reward models on the held-out set.
    pub fn reward_accuracy(&self, objective: Objective) -> Option<f64> {
        let rms = self.server.reward.as_ref()?;
        let pairs: Vec<PreferencePair> =
            self.server.holdout.iter().filter(|p| p.objective == objective).cloned().collect();
        if pairs.is_empty() {
            return None;
        }
        rlhf::ranking_accuracy(rms.get(objective), &pairs).ok()
    }

    fn local_round(&mut self, phase: Phase, round: usize) -> Result<Vec<Option<f32>>> {
        let seed = self.seed;
        let strategy = self.strategy.clone();
        let cfg = &self.cfg;
        self.clients
            .iter_mut()
            .map(|c| {
                let mut r = rng::stream(seed, phase.as_str(), key(round, c.id));
                match phase {
                    Phase::Instruct => local_sgd(c, &cfg.instruct, &mut r),
                    Phase::Reward => rlhf::local_reward_round(c, &cfg.reward, &mut r),
                    Phase::Align => rlhf::local_align_round(c, &strategy, &cfg.align, &mut r),
                }
            })
            .collect()
    }

    /// The vectors each client sends this round, one per exchanged model.
    fn uploads(&self, phase: Phase, client: &ClientState) -> Result<Vec<Upload>> {
        match phase {
            Phase::Instruct | Phase::Align => Ok(vec![Upload {
                client: client.id,
                flat: select_upload(client.model.params(), &self.strategy)?,
                data_size: client.train.len(),
            }]),
            Phase::Reward => {
                let rms =
                    client.reward.as_ref().ok_or_else(|| PwffError::Phase("client has no reward models".into()))?;
                let sets = client
                    .preferences
                    .as_ref()
                    .ok_or_else(|| PwffError::Phase("client has no preference data".into()))?;
                Ok(self
                    .objectives()
                    .into_iter()
                    .map(|o| Upload {
                        client: client.id,
                        flat: rms.get(o).params().flatten(&[ParamGroup::RewardHead]),
                        data_size: sets.train(o).len(),
                    })
                    .collect())
            }
        }
    }

    fn install(&mut self, phase: Phase, globals: Vec<FlatParams>) -> Result<()> {
        match phase {
            Phase::Instruct | Phase::Align => {
                let global = restrict(&globals[0], &self.strategy.aggregate_groups);
                broadcast(&global, self.clients.iter_mut().map(|c| c.model.params_mut()))
            }
            Phase::Reward => {
                for (o, g) in self.objectives().into_iter().zip(&globals) {
                    let server = self.server.reward.as_mut().expect("prepared");
                    let targets = self
                        .clients
                        .iter_mut()
                        .filter_map(|c| c.reward.as_mut())
                        .map(|r| r.get_mut(o).params_mut())
                        .chain(std::iter::once(server.get_mut(o).params_mut()));
                    broadcast(g, targets)?;
                }
                Ok(())
            }
        }
    }

    /// Run one phase until its convergence criterion fires.
    pub fn run_phase(&mut self, phase: Phase) -> Result<Vec<RoundReport>> {
        self.check_order(phase)?;
        self.prepare(phase)?;
        let stop = self.stop(phase);
        let mut reports = Vec::new();
        let mut scores = Vec::new();
        while !stop.should_stop(&scores) {
            let round = reports.len() + 1;
            let report = self.round(phase, round)?;
            scores.push(match phase {
                Phase::Instruct => report.global.accuracy.unwrap_or(0.0),
                Phase::Reward => report.global.accuracy.unwrap_or(0.0),
                Phase::Align => report.global.r_total().unwrap_or(0.0),
            });
            reports.push(report);
        }
        self.mark(phase);
        Ok(reports)
    }

    fn round(&mut self, phase: Phase, round: usize) -> Result<RoundReport> {
        let losses = self.local_round(phase, round)?;
        let mut per_model: Vec<Vec<Upload>> = Vec::new();
        let mut rows = Vec::with_capacity(self.clients.len());
        for (c, loss) in self.clients.iter().zip(&losses) {
            let mut row = ClientRound { client: Some(c.id), loss: loss.map(f64::from), ..Default::default() };
            if loss.is_some() {
                for (k, u) in self.uploads(phase, c)?.into_iter().enumerate() {
                    row.bits += u.flat.bits();
                    if per_model.len() <= k {
                        per_model.push(Vec::new());
                    }
                    per_model[k].push(u);
                }
                let cost = self.link(row.bits, round, c.id)?;
                row.delay_s = cost.delay_s;
                row.energy_j = cost.energy_j;
            }
            rows.push(row);
        }
        if !per_model.is_empty() {
            let globals =
                per_model.iter().map(|u| aggregate(u, self.cfg.fed.aggregation)).collect::<Result<Vec<_>>>()?;
            if self.cfg.fed.meter_downlink {
                let down: u64 = globals.iter().map(|g| restrict(g, &self.strategy.aggregate_groups).bits()).sum();
                for row in &mut rows {
                    let cost = self.link(down, round, row.client.unwrap())?;
                    row.bits += down;
                    row.delay_s += cost.delay_s;
                    row.energy_j += cost.energy_j;
                }
            }
            self.install(phase, globals)?;
        }
        let mut global = ClientRound {
            bits: rows.iter().map(|r| r.bits).sum(),
            delay_s: rows.iter().map(|r| r.delay_s).sum(),
            energy_j: rows.iter().map(|r| r.energy_j).sum(),
            ..Default::default()
        };
        let trained: Vec<f64> = rows.iter().filter_map(|r| r.loss).collect();
        if !trained.is_empty() {
            global.loss = Some(trained.iter().sum::<f64>() / trained.len() as f64);
        }
        match phase {
            Phase::Instruct | Phase::Align => {
                let evals = self.evaluate()?;
                for (row, e) in rows.iter_mut().zip(&evals) {
                    row.accuracy = Some(e.helpful);
                    if phase == Phase::Align {
                        row.r_helpful = Some(e.helpful);
                        row.r_harmless = Some(e.harmless);
                        row.forbidden_rate = Some(e.forbidden_rate);
                    }
                }
                global.accuracy = Some(Self::global_mean(&evals, |e| e.helpful));
                if phase == Phase::Align {
                    global.r_helpful = Some(Self::global_mean(&evals, |e| e.helpful));
                    global.r_harmless = Some(Self::global_mean(&evals, |e| e.harmless));
                    global.forbidden_rate = Some(Self::global_mean(&evals, |e| e.forbidden_rate));
                }
            }
            Phase::Reward => {
                let accs: Vec<f64> = self.objectives().into_iter().filter_map(|o| self.reward_accuracy(o)).collect();
                if !accs.is_empty() {
                    global.accuracy = Some(accs.iter().sum::<f64>() / accs.len() as f64);
                }
            }
        }
        Ok(RoundReport { phase, round, strategy: self.strategy.name, clients: rows, global })
    }

    fn link(&self, bits: u64, round: usize, client: usize) -> Result<LinkCost> {
        if bits == 0 {
            return Ok(LinkCost::default());
        }
        upload_cost(&self.cfg.channel, bits, round as u64, client as u64)
    }
}

/// The tensors of `flat` that belong to `groups`, in manifest order.
fn restrict(flat: &FlatParams, groups: &[ParamGroup]) -> FlatParams {
    if flat.manifest.groups().iter().all(|g| groups.contains(g)) {
        return flat.clone();
    }
    let mut out = FlatParams { manifest: Default::default(), values: Vec::new() };
    let mut off = 0;
    for e in &flat.manifest.entries {
        let n = e.numel();
        if groups.contains(&e.group) {
            out.manifest.entries.push(e.clone());
            out.values.extend_from_slice(&flat.values[off..off + n]);
        }
        off += n;
    }
    out
}
