//! Scalar scorers: a one-layer causal transformer, mean-pooled, feeding a
//! linear head. Used for both reward models and critics.
//!
//! Because the encoder is causal and the pooling is a running mean, the score
//! of every prefix of a sequence is available from a single pass; critics use
//! this to value each generation state.
//!
//! Positions restart at the first response token. Each prompt token also gets
//! an embedding for its distance from the end of the prompt, and every
//! response token shares one extra row in that table. A single attention layer
//! can then line a response token up with the prompt token it should equal,
//! whether the task reads the payload forwards or backwards.

use serde::{Deserialize, Serialize};

use super::encoder::{normal, Arch, Batch, Binder, EncoderIds};
use super::params::{ParamGroup, ParamId, ParamSet};
use crate::autodiff::{Real, Segment, Tape, Var};
use crate::error::{PwffError, Result};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScoreConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        Self { d_model: 32, n_layers: 1, n_heads: 4, d_ff: 64 }
    }
}

impl ScoreConfig {
    pub fn arch(&self, vocab_size: usize, max_seq_len: usize) -> Arch {
        Arch {
            vocab_size,
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            max_seq_len,
        }
    }
}

/// Packed `(prompt, response)` items in the scorer's position layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreBatch {
    pub batch: Batch,
    pub prompt_lens: Vec<usize>,
    anchors: Vec<usize>,
}

impl ScoreBatch {
    /// `anchor_row` is the table row shared by response tokens.
    fn build(items: &[(&[usize], &[usize])], anchor_row: usize) -> Self {
        let mut tokens = Vec::new();
        let mut positions = Vec::new();
        let mut anchors = Vec::new();
        let mut segs = Vec::with_capacity(items.len());
        for (p, r) in items {
            segs.push(Segment::new(tokens.len(), p.len() + r.len()));
            tokens.extend_from_slice(p);
            tokens.extend_from_slice(r);
            positions.extend(0..p.len());
            positions.extend(0..r.len());
            anchors.extend((0..p.len()).rev());
            anchors.extend(std::iter::repeat_n(anchor_row, r.len()));
        }
        Self {
            batch: Batch { tokens, positions, segs },
            prompt_lens: items.iter().map(|(p, _)| p.len()).collect(),
            anchors,
        }
    }

    pub fn rows(&self) -> usize {
        self.batch.rows()
    }
}

#[derive(Clone, Debug)]
pub struct ScoreModel {
    arch: Arch,
    params: ParamSet,
    enc: EncoderIds,
    anchor_emb: ParamId,
    head_w: ParamId,
    head_b: ParamId,
}

impl ScoreModel {
    /// Random encoder with a zero head, so an untrained scorer returns 0
    /// everywhere. All tensors are placed in `group`.
    pub fn new(arch: Arch, group: ParamGroup, seed: u64) -> Result<Self> {
        let mut rng = rng::stream(seed, "score-init", 0);
        let mut params = ParamSet::new();
        let enc = EncoderIds::build(&arch, group, "", &mut params, &mut rng)?;
        let rows = arch.max_seq_len + 1;
        let anchor_emb =
            params.push("anchor_emb", group, vec![rows, arch.d_model], normal(&mut rng, rows * arch.d_model, 0.5))?;
        let head_w = params.push("head.w", group, vec![1, arch.d_model], vec![0.0; arch.d_model])?;
        let head_b = params.push("head.b", group, vec![1], vec![0.0])?;
        Ok(Self { arch, params, enc, anchor_emb, head_w, head_b })
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

    /// Copy with weights unchanged and every tensor moved to `group` (a
    /// critic initialized from a reward model).
    pub fn regrouped(&self, group: ParamGroup) -> Self {
        let mut out = self.clone();
        out.params.regroup(group);
        out
    }

    /// Group holding this model's tensors.
    pub fn group(&self) -> ParamGroup {
        self.params.entries()[0].group
    }

    /// Replace the weights with `params`, which must have the same manifest.
    pub fn load(&mut self, params: ParamSet) -> Result<()> {
        let mine = self.params.manifest(&ParamGroup::ALL);
        let theirs = params.manifest(&ParamGroup::ALL);
        if mine != theirs {
            return Err(PwffError::Protocol("score model manifest mismatch".into()));
        }
        self.params = params;
        Ok(())
    }

    fn head<F: Real>(&self, tape: &mut Tape<F>, bind: &mut Binder<'_, F>, pooled: Var) -> Result<Var> {
        let w = bind.var(tape, self.head_w);
        let b = bind.var(tape, self.head_b);
        let s = tape.matmul_nt(pooled, w)?;
        tape.add(s, b)
    }

    /// Lay out `(prompt, response)` items for this model.
    pub fn batch(&self, items: &[(&[usize], &[usize])]) -> ScoreBatch {
        ScoreBatch::build(items, self.arch.max_seq_len)
    }

    fn hidden<F: Real>(&self, tape: &mut Tape<F>, bind: &mut Binder<'_, F>, sb: &ScoreBatch) -> Result<Var> {
        if sb.anchors.iter().any(|&a| a > self.arch.max_seq_len) {
            return Err(PwffError::Contract(format!("prompt longer than max_seq_len {}", self.arch.max_seq_len)));
        }
        let table = bind.var(tape, self.anchor_emb);
        let extra = tape.gather_rows(table, &sb.anchors)?;
        self.enc.forward_with(&self.arch, tape, bind, &sb.batch, Some(extra))
    }

    /// One score per item, `[items, 1]`.
    pub fn forward_scores<F: Real>(
        &self,
        tape: &mut Tape<F>,
        bind: &mut Binder<'_, F>,
        sb: &ScoreBatch,
    ) -> Result<Var> {
        let h = self.hidden(tape, bind, sb)?;
        let pooled = tape.segment_mean(h, &sb.batch.segs)?;
        self.head(tape, bind, pooled)
    }

    /// Score of every prefix, `[rows, 1]`: row `i` scores tokens `start..=i`.
    pub fn forward_prefix_scores<F: Real>(
        &self,
        tape: &mut Tape<F>,
        bind: &mut Binder<'_, F>,
        sb: &ScoreBatch,
    ) -> Result<Var> {
        let h = self.hidden(tape, bind, sb)?;
        let pooled = tape.prefix_mean(h, &sb.batch.segs)?;
        self.head(tape, bind, pooled)
    }

    /// Score `prompt ++ response`. An empty response scores the prompt alone.
    pub fn score(&self, prompt: &[usize], response: &[usize]) -> Result<f32> {
        Ok(self.score_batch(&[(prompt, response)])?[0])
    }

    pub fn score_batch(&self, items: &[(&[usize], &[usize])]) -> Result<Vec<f32>> {
        let mut tape = Tape::<f32>::new();
        let mut bind = Binder::new(&self.params, &[]);
        let s = self.forward_scores(&mut tape, &mut bind, &self.batch(items))?;
        Ok(tape.value(s).data().to_vec())
    }

    /// Value of each state `prompt ++ actions[..t]` for `t` in `0..actions.len()`.
    pub fn state_values(&self, prompt: &[usize], actions: &[usize]) -> Result<Vec<f32>> {
        if actions.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape = Tape::<f32>::new();
        let mut bind = Binder::new(&self.params, &[]);
        let sb = self.batch(&[(prompt, &actions[..actions.len() - 1])]);
        let s = self.forward_prefix_scores(&mut tape, &mut bind, &sb)?;
        Ok(tape.value(s).data()[prompt.len() - 1..].to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arch() -> Arch {
        ScoreConfig::default().arch(20, 12)
    }

    #[test]
    fn zero_head_scores_zero() {
        let m = ScoreModel::new(arch(), ParamGroup::RewardHead, 5).unwrap();
        assert_eq!(m.score(&[2, 5, 6, 1], &[5, 6]).unwrap(), 0.0);
        assert_eq!(m.score(&[2, 5, 6, 1], &[]).unwrap(), 0.0);
    }

    fn with_random_head(seed: u64) -> ScoreModel {
        let mut m = ScoreModel::new(arch(), ParamGroup::RewardHead, seed).unwrap();
        let id = m.head_w;
        for (i, v) in m.params_mut().data_mut(id).iter_mut().enumerate() {
            *v = ((i as f32) * 0.7).sin();
        }
        m
    }

    #[test]
    fn identical_inputs_identical_scores() {
        let m = with_random_head(5);
        let s = m.score_batch(&[(&[2, 5, 1], &[5]), (&[2, 5, 1], &[5])]).unwrap();
        assert_eq!(s[0].to_bits(), s[1].to_bits());
    }

    #[test]
    fn state_values_match_independent_prefix_scoring() {
        let m = with_random_head(9);
        let prompt = [3, 7, 8, 1];
        let actions = [8, 7, 0];
        let vals = m.state_values(&prompt, &actions).unwrap();
        assert_eq!(vals.len(), 3);
        for t in 0..actions.len() {
            let direct = m.score(&prompt, &actions[..t]).unwrap();
            assert!((vals[t] - direct).abs() < 1e-5, "t={}: {} vs {}", t, vals[t], direct);
        }
    }

    #[test]
    fn regrouped_keeps_weights() {
        let m = with_random_head(1);
        let c = m.regrouped(ParamGroup::CriticHead);
        assert_eq!(c.group(), ParamGroup::CriticHead);
        assert_eq!(c.params().count(ParamGroup::CriticHead), m.params().count(ParamGroup::RewardHead));
        assert_eq!(c.score(&[2, 5, 1], &[5]).unwrap(), m.score(&[2, 5, 1], &[5]).unwrap());
    }
}
