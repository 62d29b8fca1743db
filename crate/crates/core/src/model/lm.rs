//! Decoder-only language model with injectable adapters and LoRA.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::encoder::{matvec, normal, uniform, AdapterIds, Arch, Batch, Binder, EncoderIds, KvCache, LoraIds};
use super::params::{ParamGroup, ParamId, ParamSet};
use crate::autodiff::{Real, Tape, Tensor, Var};
use crate::error::{PwffError, Result};
use crate::rng::{self, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub adapter_bottleneck: usize,
    /// Default LoRA rank; clients may pick their own.
    pub lora_rank: usize,
    pub lora_alpha: f32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 20,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 128,
            max_seq_len: 12,
            adapter_bottleneck: 10,
            lora_rank: 4,
            lora_alpha: 8.0,
        }
    }
}

impl ModelConfig {
    pub fn arch(&self) -> Arch {
        Arch {
            vocab_size: self.vocab_size,
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            max_seq_len: self.max_seq_len,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.arch().validate()?;
        if self.adapter_bottleneck == 0 {
            return Err(PwffError::Config("adapter_bottleneck must be at least 1".into()));
        }
        if self.lora_rank > self.d_model {
            return Err(PwffError::Config(format!(
                "lora_rank {} exceeds min(d_in, d_out) = {}",
                self.lora_rank, self.d_model
            )));
        }
        Ok(())
    }

    /// PEFT plan with both module kinds at the configured sizes.
    pub fn peft(&self) -> PeftPlan {
        PeftPlan {
            adapters: true,
            adapter_bottleneck: self.adapter_bottleneck,
            lora_rank: self.lora_rank,
            lora_alpha: self.lora_alpha,
        }
    }

    /// Adapter parameters: two sites per layer, each `down (b×d + b) + up (d×b + d)`.
    pub fn adapter_param_count(&self) -> usize {
        let (d, b) = (self.d_model, self.adapter_bottleneck);
        2 * self.n_layers * (d * b + b + b * d + d)
    }

    /// LoRA parameters on the query and value projections: `A (r×d) + B (d×r)` per site.
    pub fn lora_param_count(&self, rank: usize) -> usize {
        2 * self.n_layers * (rank * self.d_model + self.d_model * rank)
    }
}

/// Which PEFT modules to inject and at what size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PeftPlan {
    pub adapters: bool,
    pub adapter_bottleneck: usize,
    /// `0` leaves the projections without LoRA.
    pub lora_rank: usize,
    pub lora_alpha: f32,
}

impl PeftPlan {
    pub fn groups(&self) -> Vec<ParamGroup> {
        let mut g = Vec::new();
        if self.adapters {
            g.push(ParamGroup::Adapter);
        }
        if self.lora_rank > 0 {
            g.push(ParamGroup::Lora);
        }
        g
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Sampler {
    Greedy,
    Temperature(f32),
    TopK { k: usize, temperature: f32 },
}

/// A sampled continuation and the log-probability of each chosen token under
/// the untempered model distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct Generation {
    pub tokens: Vec<usize>,
    pub logprobs: Vec<f32>,
}

impl Generation {
    /// The continuation without a trailing stop token.
    pub fn response(&self, stop: Option<usize>) -> &[usize] {
        match (stop, self.tokens.last()) {
            (Some(s), Some(&t)) if t == s => &self.tokens[..self.tokens.len() - 1],
            _ => &self.tokens,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LanguageModel {
    arch: Arch,
    params: ParamSet,
    enc: EncoderIds,
    w_out: ParamId,
    peft: Option<PeftPlan>,
}

impl LanguageModel {
    /// Randomly initialized base model; every tensor is in the `base` group.
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let arch = cfg.arch();
        let mut rng = rng::stream(seed, "lm-base", 0);
        let mut params = ParamSet::new();
        let enc = EncoderIds::build(&arch, ParamGroup::Base, "", &mut params, &mut rng)?;
        let (v, d) = (arch.vocab_size, arch.d_model);
        let w_out =
            params.push("lm_head", ParamGroup::Base, vec![v, d], normal(&mut rng, v * d, 1.0 / (d as f32).sqrt()))?;
        Ok(Self { arch, params, enc, w_out, peft: None })
    }

    pub fn arch(&self) -> &Arch {
        &self.arch
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Replace the weights with `params`, which must have the same manifest.
    pub fn load(&mut self, params: ParamSet) -> Result<()> {
        if self.params.manifest(&ParamGroup::ALL) != params.manifest(&ParamGroup::ALL) {
            return Err(PwffError::Protocol("language model manifest mismatch".into()));
        }
        self.params = params;
        Ok(())
    }

    pub fn peft(&self) -> Option<&PeftPlan> {
        self.peft.as_ref()
    }

    /// Groups updated by training: whatever PEFT modules are present.
    pub fn trainable_groups(&self) -> Vec<ParamGroup> {
        self.peft.as_ref().map(PeftPlan::groups).unwrap_or_default()
    }

    /// Copy of this base model with adapters and LoRA injected. Up-projections
    /// and `B` start at zero, so outputs are unchanged until the first update.
    pub fn insert_peft(&self, plan: &PeftPlan, seed: u64) -> Result<Self> {
        if self.peft.is_some() {
            return Err(PwffError::Contract("PEFT modules are already inserted".into()));
        }
        let d = self.arch.d_model;
        if plan.adapters && plan.adapter_bottleneck == 0 {
            return Err(PwffError::Config("adapter_bottleneck must be at least 1".into()));
        }
        if plan.lora_rank > d {
            return Err(PwffError::Config(format!("lora_rank {} exceeds {}", plan.lora_rank, d)));
        }
        let mut out = self.clone();
        let mut rng = rng::stream(seed, "peft-init", 0);
        let bound = 1.0 / (d as f32).sqrt();
        for (l, blk) in out.enc.blocks.iter_mut().enumerate() {
            if plan.adapters {
                let b = plan.adapter_bottleneck;
                let site = |name: &str, params: &mut ParamSet, rng: &mut Rng| -> Result<AdapterIds> {
                    let g = ParamGroup::Adapter;
                    Ok(AdapterIds {
                        down_w: params.push(
                            format!("h{l}.{name}.down.w"),
                            g,
                            vec![b, d],
                            uniform(rng, b * d, bound),
                        )?,
                        down_b: params.push(format!("h{l}.{name}.down.b"), g, vec![b], uniform(rng, b, bound))?,
                        up_w: params.push(format!("h{l}.{name}.up.w"), g, vec![d, b], vec![0.0; d * b])?,
                        up_b: params.push(format!("h{l}.{name}.up.b"), g, vec![d], vec![0.0; d])?,
                    })
                };
                let attn = site("adapter_attn", &mut out.params, &mut rng)?;
                let mlp = site("adapter_mlp", &mut out.params, &mut rng)?;
                blk.adapters = Some([attn, mlp]);
            }
            if plan.lora_rank > 0 {
                let r = plan.lora_rank;
                let scale = plan.lora_alpha / r as f32;
                let site = |name: &str, params: &mut ParamSet, rng: &mut Rng| -> Result<LoraIds> {
                    let g = ParamGroup::Lora;
                    Ok(LoraIds {
                        a: params.push(format!("h{l}.{name}.lora_a"), g, vec![r, d], uniform(rng, r * d, bound))?,
                        b: params.push(format!("h{l}.{name}.lora_b"), g, vec![d, r], vec![0.0; d * r])?,
                        scale,
                    })
                };
                blk.lora_q = Some(site("attn.q", &mut out.params, &mut rng)?);
                blk.lora_v = Some(site("attn.v", &mut out.params, &mut rng)?);
            }
        }
        out.peft = Some(plan.clone());
        Ok(out)
    }

    /// Logits `[rows, vocab]` for a packed batch.
    pub fn forward<F: Real>(&self, tape: &mut Tape<F>, bind: &mut Binder<'_, F>, batch: &Batch) -> Result<Var> {
        let h = self.enc.forward(&self.arch, tape, bind, batch)?;
        let w = bind.var(tape, self.w_out);
        tape.matmul_nt(h, w)
    }

    /// Causal logits for one sequence, `[len, vocab]`.
    pub fn forward_lm(&self, tokens: &[usize]) -> Result<Tensor<f32>> {
        if tokens.is_empty() {
            return Err(PwffError::Contract("cannot run the model on an empty sequence".into()));
        }
        let mut tape = Tape::<f32>::new();
        let mut bind = Binder::new(&self.params, &[]);
        let logits = self.forward(&mut tape, &mut bind, &Batch::new(&[tokens]))?;
        Ok(tape.value(logits).clone())
    }

    /// Mean teacher-forced cross-entropy of each continuation given its prompt,
    /// with gradients for the trainable groups.
    pub fn supervised_grads(&self, examples: &[(&[usize], &[usize])]) -> Result<(f32, Vec<(ParamId, Vec<f32>)>)> {
        let mut inputs = Vec::with_capacity(examples.len());
        let mut next = Vec::new();
        for (prompt, cont) in examples {
            if prompt.is_empty() || cont.is_empty() {
                return Err(PwffError::Contract("supervised example needs a prompt and a continuation".into()));
            }
            let seq: Vec<usize> = prompt.iter().chain(cont.iter()).copied().collect();
            inputs.push(seq[..seq.len() - 1].to_vec());
            next.push((prompt.len(), seq));
        }
        let batch = Batch::new(&inputs);
        let mut picks = Vec::new();
        for ((p, seq), seg) in next.iter().zip(&batch.segs) {
            for pos in p - 1..seq.len() - 1 {
                picks.push((seg.start + pos, seq[pos + 1]));
            }
        }
        let groups = self.trainable_groups();
        let mut tape = Tape::<f32>::new();
        let mut bind = Binder::new(&self.params, &groups);
        let logits = self.forward(&mut tape, &mut bind, &batch)?;
        let loss = tape.cross_entropy(logits, &picks)?;
        let value = tape.value(loss).item();
        let grads = tape.backward(loss)?;
        Ok((value, bind.grads(&grads)))
    }

    /// Log-probability of each continuation token given everything before it.
    pub fn score_continuation(&self, prompt: &[usize], continuation: &[usize]) -> Result<Vec<f32>> {
        if continuation.is_empty() {
            return Ok(Vec::new());
        }
        let seq: Vec<usize> = prompt.iter().chain(continuation).copied().collect();
        let mut tape = Tape::<f32>::new();
        let mut bind = Binder::new(&self.params, &[]);
        let logits = self.forward(&mut tape, &mut bind, &Batch::new(&[&seq[..seq.len() - 1]]))?;
        let picks: Vec<(usize, usize)> =
            continuation.iter().enumerate().map(|(i, &t)| (prompt.len() - 1 + i, t)).collect();
        let lp = tape.log_softmax_pick(logits, &picks)?;
        Ok(tape.value(lp).data().to_vec())
    }

    pub fn generate(
        &self,
        prompt: &[usize],
        max_new: usize,
        sampler: Sampler,
        stop: Option<usize>,
        rng: &mut Rng,
    ) -> Result<Generation> {
        Ok(self.generate_batch(&[prompt.to_vec()], max_new, sampler, stop, rng)?.remove(0))
    }

    /// Sample continuations for several prompts at once. Each step runs one
    /// packed forward pass over every unfinished sequence; random draws are
    /// consumed in prompt order so results do not depend on batch composition
    /// beyond that order.
    pub fn generate_batch(
        &self,
        prompts: &[Vec<usize>],
        max_new: usize,
        sampler: Sampler,
        stop: Option<usize>,
        rng: &mut Rng,
    ) -> Result<Vec<Generation>> {
        if prompts.iter().any(|p| p.is_empty()) {
            return Err(PwffError::Contract("generation needs a non-empty prompt".into()));
        }
        let max_len = self.arch.max_seq_len;
        let mut gens: Vec<Generation> =
            prompts.iter().map(|_| Generation { tokens: vec![], logprobs: vec![] }).collect();
        let mut caches: Vec<KvCache> = vec![KvCache::default(); prompts.len()];
        let mut last: Vec<Vec<f32>> = vec![Vec::new(); prompts.len()];
        let mut active: Vec<usize> = Vec::new();
        if max_new > 0 {
            for (i, p) in prompts.iter().enumerate() {
                if p.len() < max_len {
                    for &t in p {
                        last[i] = self.enc.step(&self.arch, &self.params, &mut caches[i], t)?;
                    }
                    active.push(i);
                }
            }
        }
        for step in 0..max_new {
            if active.is_empty() {
                break;
            }
            let mut still = Vec::with_capacity(active.len());
            for &i in &active {
                let logits = matvec(&self.params, self.w_out, &last[i], None);
                let (tok, lp) = sample_row(&logits, sampler, rng);
                gens[i].tokens.push(tok);
                gens[i].logprobs.push(lp);
                if stop != Some(tok) && caches[i].len() + 1 < max_len && step + 1 < max_new {
                    last[i] = self.enc.step(&self.arch, &self.params, &mut caches[i], tok)?;
                    still.push(i);
                }
            }
            active = still;
        }
        Ok(gens)
    }
}

fn log_softmax(row: &[f32]) -> Vec<f64> {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x as f64));
    let lse = max + row.iter().map(|&x| (x as f64 - max).exp()).sum::<f64>().ln();
    row.iter().map(|&x| x as f64 - lse).collect()
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// Draw a token and return it with its untempered log-probability.
fn sample_row(row: &[f32], sampler: Sampler, rng: &mut Rng) -> (usize, f32) {
    let lp = log_softmax(row);
    let (temperature, k) = match sampler {
        Sampler::Greedy => {
            let t = argmax(row);
            return (t, lp[t] as f32);
        }
        Sampler::Temperature(t) => (t, row.len()),
        Sampler::TopK { k, temperature } => (temperature, k.clamp(1, row.len())),
    };
    let mut order: Vec<usize> = (0..row.len()).collect();
    if k < row.len() {
        order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
        order.truncate(k);
    }
    let tau = (temperature as f64).max(1e-6);
    let max = order.iter().map(|&i| lp[i]).fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = order.iter().map(|&i| ((lp[i] - max) / tau).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    let mut pick = order[order.len() - 1];
    for (&i, &w) in order.iter().zip(&weights) {
        if u < w {
            pick = i;
            break;
        }
        u -= w;
    }
    (pick, lp[pick] as f32)
}
