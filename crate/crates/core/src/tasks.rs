//! Synthetic instruction-following tasks with exact oracles.
//!
//! Token layout: `0` ends a response, `1` separates prompt from response,
//! `2..=4` name the task kind, and every id from `5` up is content. The last
//! `n_forbidden` content ids form the forbidden set.
//!
//! A prompt is `[kind, payload.., SEP]` and the target is the transformed
//! payload. Harmful requests carry forbidden tokens in their payload, so a
//! faithful response repeats them; that is the only place helpfulness and
//! harmlessness pull apart.

use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{PwffError, Result};
use crate::model::{LanguageModel, Sampler};
use crate::rng::{self, Rng};

pub const EOS: usize = 0;
pub const SEP: usize = 1;
const FIRST_CONTENT: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Copy,
    Reverse,
    Sort,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [TaskKind::Copy, TaskKind::Reverse, TaskKind::Sort];

    pub fn token(self) -> usize {
        match self {
            TaskKind::Copy => 2,
            TaskKind::Reverse => 3,
            TaskKind::Sort => 4,
        }
    }

    pub fn index(self) -> usize {
        self.token() - 2
    }

    pub fn apply(self, payload: &[usize]) -> Vec<usize> {
        let mut out = payload.to_vec();
        match self {
            TaskKind::Copy => {}
            TaskKind::Reverse => out.reverse(),
            TaskKind::Sort => out.sort_unstable(),
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabPolicy {
    benign: Vec<usize>,
    forbidden: Vec<usize>,
}

impl VocabPolicy {
    pub fn new(benign: Vec<usize>, forbidden: Vec<usize>, vocab_size: usize) -> Result<Self> {
        if forbidden.is_empty() {
            return Err(PwffError::Config("forbidden set is empty".into()));
        }
        if benign.is_empty() {
            return Err(PwffError::Config("benign set is empty".into()));
        }
        if let Some(&t) = benign.iter().chain(&forbidden).find(|&&t| t >= vocab_size || t < FIRST_CONTENT) {
            return Err(PwffError::Config(format!(
                "token {} is not a content id of a {}-token vocabulary",
                t, vocab_size
            )));
        }
        if benign.iter().any(|t| forbidden.contains(t)) {
            return Err(PwffError::Config("benign and forbidden sets overlap".into()));
        }
        Ok(Self { benign, forbidden })
    }

    /// Content ids split so that the top `n_forbidden` are forbidden.
    pub fn standard(vocab_size: usize, n_forbidden: usize) -> Result<Self> {
        if vocab_size < FIRST_CONTENT + n_forbidden + 1 {
            return Err(PwffError::Config(format!(
                "vocab_size {} leaves no benign tokens with {} forbidden",
                vocab_size, n_forbidden
            )));
        }
        let split = vocab_size - n_forbidden;
        Self::new((FIRST_CONTENT..split).collect(), (split..vocab_size).collect(), vocab_size)
    }

    pub fn benign(&self) -> &[usize] {
        &self.benign
    }

    pub fn forbidden(&self) -> &[usize] {
        &self.forbidden
    }

    pub fn is_forbidden(&self, t: usize) -> bool {
        self.forbidden.contains(&t)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionTask {
    pub kind: TaskKind,
    pub prompt: Vec<usize>,
    pub target: Vec<usize>,
}

impl InstructionTask {
    pub fn new(kind: TaskKind, payload: &[usize]) -> Self {
        let mut prompt = Vec::with_capacity(payload.len() + 2);
        prompt.push(kind.token());
        prompt.extend_from_slice(payload);
        prompt.push(SEP);
        Self { kind, prompt, target: kind.apply(payload) }
    }

    pub fn payload(&self) -> &[usize] {
        &self.prompt[1..self.prompt.len() - 1]
    }

    /// Teacher-forcing sequence: prompt, target, end marker.
    pub fn full_sequence(&self) -> Vec<usize> {
        let mut s = self.prompt.clone();
        s.extend_from_slice(&self.target);
        s.push(EOS);
        s
    }

    pub fn is_harmful(&self, policy: &VocabPolicy) -> bool {
        self.payload().iter().any(|&t| policy.is_forbidden(t))
    }
}

/// Weights over copy, reverse and sort.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskMix {
    pub copy: f64,
    pub reverse: f64,
    pub sort: f64,
}

impl Default for TaskMix {
    fn default() -> Self {
        Self { copy: 1.0 / 3.0, reverse: 1.0 / 3.0, sort: 1.0 / 3.0 }
    }
}

impl TaskMix {
    pub fn weights(&self) -> [f64; 3] {
        [self.copy, self.reverse, self.sort]
    }

    pub fn validate(&self) -> Result<()> {
        let w = self.weights();
        if w.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(PwffError::Config(format!("task mix weights must be nonnegative, got {:?}", w)));
        }
        let s: f64 = w.iter().sum();
        if s == 0.0 {
            return Err(PwffError::Config("task mix is empty".into()));
        }
        if (s - 1.0).abs() > 1e-9 {
            return Err(PwffError::Config(format!("task mix sums to {}, expected 1", s)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskConfig {
    pub min_payload: usize,
    pub max_payload: usize,
    pub mix: TaskMix,
    pub n_forbidden: usize,
    /// Probability that a task is a harmful request.
    pub harmful_rate: f64,
    /// Fraction of a harmful payload drawn from the forbidden set (at least one token).
    pub harmful_density: f64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            min_payload: 2,
            max_payload: 4,
            mix: TaskMix::default(),
            n_forbidden: 3,
            harmful_rate: 0.5,
            harmful_density: 0.6,
        }
    }
}

impl TaskConfig {
    pub fn validate(&self, max_seq_len: usize) -> Result<()> {
        self.mix.validate()?;
        if self.min_payload == 0 || self.min_payload > self.max_payload {
            return Err(PwffError::Config(format!(
                "payload bounds {}..={} are invalid",
                self.min_payload, self.max_payload
            )));
        }
        // prompt (kind + payload + SEP) and target + EOS
        if 2 * self.max_payload + 3 > max_seq_len {
            return Err(PwffError::Config(format!(
                "max_payload {} does not fit max_seq_len {}",
                self.max_payload, max_seq_len
            )));
        }
        if !(0.0..=1.0).contains(&self.harmful_rate) || !(0.0..=1.0).contains(&self.harmful_density) {
            return Err(PwffError::Config("harmful_rate and harmful_density must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

fn pick_kind(mix: &[f64; 3], rng: &mut Rng) -> TaskKind {
    let u: f64 = rng.gen::<f64>() * mix.iter().sum::<f64>();
    let mut acc = 0.0;
    for (k, &w) in TaskKind::ALL.iter().zip(mix) {
        acc += w;
        if u < acc {
            return *k;
        }
    }
    *TaskKind::ALL.iter().zip(mix).rev().find(|(_, &w)| w > 0.0).unwrap().0
}

/// Draw one task with an explicit harmful flag.
pub fn sample_task(cfg: &TaskConfig, policy: &VocabPolicy, harmful: bool, rng: &mut Rng) -> InstructionTask {
    let kind = pick_kind(&cfg.mix.weights(), rng);
    let len = rng.gen_range(cfg.min_payload..=cfg.max_payload);
    let mut payload: Vec<usize> = (0..len).map(|_| *policy.benign().choose(rng).unwrap()).collect();
    if harmful {
        let k = ((cfg.harmful_density * len as f64).round() as usize).clamp(1, len);
        let mut pos: Vec<usize> = (0..len).collect();
        pos.shuffle(rng);
        for &p in &pos[..k] {
            payload[p] = *policy.forbidden().choose(rng).unwrap();
        }
    }
    InstructionTask::new(kind, &payload)
}

pub fn gen_dataset(seed: u64, n: usize, cfg: &TaskConfig, policy: &VocabPolicy) -> Result<Vec<InstructionTask>> {
    cfg.mix.validate()?;
    let mut rng = rng::stream(seed, "dataset", 0);
    Ok((0..n)
        .map(|_| {
            let harmful = rng.gen::<f64>() < cfg.harmful_rate;
            sample_task(cfg, policy, harmful, &mut rng)
        })
        .collect())
}

/// Dirichlet draw computed in log space so that small concentrations do not
/// underflow to an all-zero vector.
fn dirichlet(alpha: f64, n: usize, rng: &mut Rng) -> Vec<f64> {
    let gamma = Gamma::new(alpha + 1.0, 1.0).expect("alpha > 0");
    let logs: Vec<f64> = (0..n)
        .map(|_| {
            let g: f64 = gamma.sample(rng);
            let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            g.ln() + u.ln() / alpha
        })
        .collect();
    let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|x| x / s).collect()
}

/// Label-wise Dirichlet split: for each task kind, its examples are shuffled
/// and divided among clients in proportions drawn from `Dirichlet(alpha)`.
/// Returns dataset indices per client, each sorted ascending.
pub fn dirichlet_partition(
    dataset: &[InstructionTask],
    n_clients: usize,
    alpha: f64,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    if n_clients < 2 {
        return Err(PwffError::Config(format!("need at least 2 clients, got {}", n_clients)));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(PwffError::Config(format!("alpha must be positive, got {}", alpha)));
    }
    if dataset.len() < n_clients {
        return Err(PwffError::Config(format!("{} examples cannot cover {} clients", dataset.len(), n_clients)));
    }
    let mut rng = rng::stream(seed, "partition", 0);
    let mut shards = vec![Vec::new(); n_clients];
    for kind in TaskKind::ALL {
        let mut idx: Vec<usize> = (0..dataset.len()).filter(|&i| dataset[i].kind == kind).collect();
        idx.shuffle(&mut rng);
        let p = dirichlet(alpha, n_clients, &mut rng);
        let mut acc = 0.0;
        let mut start = 0;
        for (c, shard) in shards.iter_mut().enumerate() {
            acc += p[c];
            let end =
                if c + 1 == n_clients { idx.len() } else { ((acc * idx.len() as f64).round() as usize).min(idx.len()) };
            shard.extend_from_slice(&idx[start..end.max(start)]);
            start = end.max(start);
        }
    }
    for s in &mut shards {
        s.sort_unstable();
    }
    Ok(shards)
}

/// Kind proportions of a set of tasks.
pub fn kind_histogram<'a>(tasks: impl IntoIterator<Item = &'a InstructionTask>) -> [f64; 3] {
    let mut h = [0.0; 3];
    let mut n = 0.0;
    for t in tasks {
        h[t.kind.index()] += 1.0;
        n += 1.0;
    }
    if n > 0.0 {
        h.iter_mut().for_each(|x| *x /= n);
    }
    h
}

pub fn total_variation(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

/// Positional match rate, normalized by the longer of target and response.
pub fn oracle_helpful(task: &InstructionTask, response: &[usize]) -> f64 {
    let denom = task.target.len().max(response.len());
    if denom == 0 {
        return 1.0;
    }
    let hits = task.target.iter().zip(response).filter(|(a, b)| a == b).count();
    hits as f64 / denom as f64
}

pub fn oracle_harmless(response: &[usize], policy: &VocabPolicy) -> f64 {
    if response.is_empty() {
        return 1.0;
    }
    let bad = response.iter().filter(|&&t| policy.is_forbidden(t)).count();
    1.0 - bad as f64 / response.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Helpful,
    Harmless,
}

impl Objective {
    pub fn score(self, task: &InstructionTask, response: &[usize], policy: &VocabPolicy) -> f64 {
        match self {
            Objective::Helpful => oracle_helpful(task, response),
            Objective::Harmless => oracle_harmless(response, policy),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub prompt: Vec<usize>,
    pub chosen: Vec<usize>,
    pub rejected: Vec<usize>,
    pub objective: Objective,
}

/// Order two responses by the oracle; `None` on a tie.
pub fn rank_pair(
    task: &InstructionTask,
    a: &[usize],
    b: &[usize],
    objective: Objective,
    policy: &VocabPolicy,
) -> Option<PreferencePair> {
    let (sa, sb) = (objective.score(task, a, policy), objective.score(task, b, policy));
    if sa == sb {
        return None;
    }
    let (chosen, rejected) = if sa > sb { (a, b) } else { (b, a) };
    Some(PreferencePair {
        prompt: task.prompt.clone(),
        chosen: chosen.to_vec(),
        rejected: rejected.to_vec(),
        objective,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreferenceConfig {
    pub sampler: Sampler,
    /// Extra attempts per prompt after a tie.
    pub retries: usize,
    pub max_new: usize,
}

impl Default for PreferenceConfig {
    fn default() -> Self {
        Self { sampler: Sampler::Temperature(1.0), retries: 4, max_new: 6 }
    }
}

/// Sample two responses per prompt (cycling through `tasks`) and order them
/// by the objective's oracle. Ties are resampled up to `cfg.retries` times and
/// then skipped.
pub fn gen_preferences(
    model: &LanguageModel,
    tasks: &[InstructionTask],
    n_pairs: usize,
    objective: Objective,
    policy: &VocabPolicy,
    cfg: &PreferenceConfig,
    seed: u64,
) -> Result<Vec<PreferencePair>> {
    if n_pairs == 0 || tasks.is_empty() {
        return Err(PwffError::Config("preference generation needs n_pairs >= 1 and a non-empty task list".into()));
    }
    let mut rng = rng::stream(seed, "preferences", objective as u64);
    let mut slots: Vec<Option<PreferencePair>> = vec![None; n_pairs];
    let mut pending: Vec<usize> = (0..n_pairs).collect();
    for _ in 0..=cfg.retries {
        if pending.is_empty() {
            break;
        }
        let prompts: Vec<Vec<usize>> = pending
            .iter()
            .flat_map(|&i| [tasks[i % tasks.len()].prompt.clone(), tasks[i % tasks.len()].prompt.clone()])
            .collect();
        let gens = model.generate_batch(&prompts, cfg.max_new, cfg.sampler, Some(EOS), &mut rng)?;
        let mut still = Vec::new();
        for (j, &i) in pending.iter().enumerate() {
            let task = &tasks[i % tasks.len()];
            match rank_pair(
                task,
                gens[2 * j].response(Some(EOS)),
                gens[2 * j + 1].response(Some(EOS)),
                objective,
                policy,
            ) {
                Some(p) => slots[i] = Some(p),
                None => still.push(i),
            }
        }
        pending = still;
    }
    let pairs: Vec<PreferencePair> = slots.into_iter().flatten().collect();
    if pairs.is_empty() {
        return Err(PwffError::DegeneratePolicy(format!(
            "every {:?} pair tied after {} retries",
            objective, cfg.retries
        )));
    }
    Ok(pairs)
}

/// Write records as one JSON object per line.
pub fn dump_records<T: Serialize, W: Write>(records: &[T], mut out: W) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(|e| PwffError::Format(e.to_string()))?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn load_records<T: for<'de> Deserialize<'de>, R: BufRead>(input: R) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| PwffError::Format(format!("line {}: {}", n + 1, e)))?);
    }
    Ok(out)
}
