//! Pre-LN causal transformer stack shared by the language model and the
//! reward/critic scorers.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::params::{ParamGroup, ParamId, ParamSet};
use crate::autodiff::{dot, gelu_tanh, softmax_row, Gradients, Real, Segment, Tape, Tensor, Var, LN_EPS};
use crate::error::{PwffError, Result};
use crate::rng::Rng;

/// Architecture of a transformer stack.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Arch {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
}

impl Arch {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.d_model == 0 || self.n_heads == 0 || self.max_seq_len == 0 {
            return Err(PwffError::Config("model dimensions must be positive".into()));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(PwffError::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }
}

/// Several token sequences packed row-wise; attention never crosses segments.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub tokens: Vec<usize>,
    pub positions: Vec<usize>,
    pub segs: Vec<Segment>,
}

impl Batch {
    pub fn new<S: AsRef<[usize]>>(seqs: &[S]) -> Self {
        let mut tokens = Vec::new();
        let mut positions = Vec::new();
        let mut segs = Vec::with_capacity(seqs.len());
        for s in seqs {
            let s = s.as_ref();
            segs.push(Segment::new(tokens.len(), s.len()));
            tokens.extend_from_slice(s);
            positions.extend(0..s.len());
        }
        Self { tokens, positions, segs }
    }

    pub fn rows(&self) -> usize {
        self.tokens.len()
    }

    pub(crate) fn check(&self, arch: &Arch) -> Result<()> {
        if self.segs.iter().any(|s| s.len == 0) {
            return Err(PwffError::Contract("empty sequence in batch".into()));
        }
        if let Some(s) = self.segs.iter().find(|s| s.len > arch.max_seq_len) {
            return Err(PwffError::Contract(format!(
                "sequence of length {} exceeds max_seq_len {}",
                s.len, arch.max_seq_len
            )));
        }
        if let Some(&t) = self.tokens.iter().find(|&&t| t >= arch.vocab_size) {
            return Err(PwffError::Index(format!("token id {} >= vocabulary size {}", t, arch.vocab_size)));
        }
        Ok(())
    }
}

/// Maps parameters onto tape leaves for one forward pass. Parameters of the
/// `trainable` groups become gradient-carrying leaves; all others are constants.
pub struct Binder<'p, F: Real> {
    params: &'p ParamSet,
    trainable: Vec<ParamGroup>,
    vars: Vec<Option<Var>>,
    overrides: Vec<Option<Tensor<F>>>,
}

impl<'p, F: Real> Binder<'p, F> {
    pub fn new(params: &'p ParamSet, trainable: &[ParamGroup]) -> Self {
        Self {
            params,
            trainable: trainable.to_vec(),
            vars: vec![None; params.len()],
            overrides: vec![None; params.len()],
        }
    }

    /// Bind `id` to an explicit value instead of the stored `f32` data.
    pub fn set_override(&mut self, id: ParamId, value: Tensor<F>) {
        self.overrides[id.0] = Some(value);
    }

    pub fn var(&mut self, tape: &mut Tape<F>, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let e = self.params.get(id);
        let value = match self.overrides[id.0].take() {
            Some(t) => t,
            None => Tensor::from_f32(e.shape.clone(), &e.data).expect("stored shape is consistent"),
        };
        let v = tape.leaf(value, self.trainable.contains(&e.group));
        self.vars[id.0] = Some(v);
        v
    }

    pub fn bound(&self, id: ParamId) -> Option<Var> {
        self.vars[id.0]
    }

    /// Gradients for every trainable parameter, zero-filled when unused.
    pub fn grads(&self, grads: &Gradients<F>) -> Vec<(ParamId, Vec<f32>)> {
        self.params
            .ids_in(&self.trainable)
            .into_iter()
            .map(|id| {
                let g = match self.vars[id.0].and_then(|v| grads.get(v)) {
                    Some(g) => g.iter().map(|x| x.as_f32()).collect(),
                    None => vec![0.0; self.params.get(id).numel()],
                };
                (id, g)
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
pub(crate) struct AdapterIds {
    pub down_w: ParamId,
    pub down_b: ParamId,
    pub up_w: ParamId,
    pub up_b: ParamId,
}

#[derive(Clone, Debug)]
pub(crate) struct LoraIds {
    pub a: ParamId,
    pub b: ParamId,
    pub scale: f32,
}

#[derive(Clone, Debug)]
pub(crate) struct BlockIds {
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    /// After attention and after the MLP.
    pub adapters: Option<[AdapterIds; 2]>,
    pub lora_q: Option<LoraIds>,
    pub lora_v: Option<LoraIds>,
}

#[derive(Clone, Debug)]
pub(crate) struct EncoderIds {
    pub tok_emb: ParamId,
    pub pos_emb: ParamId,
    pub blocks: Vec<BlockIds>,
    pub lnf_g: ParamId,
    pub lnf_b: ParamId,
}

pub(crate) fn normal(rng: &mut Rng, n: usize, std: f32) -> Vec<f32> {
    let d = Normal::new(0.0f32, std).expect("positive std");
    (0..n).map(|_| d.sample(rng)).collect()
}

pub(crate) fn uniform(rng: &mut Rng, n: usize, bound: f32) -> Vec<f32> {
    (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
}

impl EncoderIds {
    pub fn build(arch: &Arch, group: ParamGroup, prefix: &str, params: &mut ParamSet, rng: &mut Rng) -> Result<Self> {
        arch.validate()?;
        let (d, f, v) = (arch.d_model, arch.d_ff, arch.vocab_size);
        let lin = |i: usize| 1.0 / (i as f32).sqrt();
        let resid = 1.0 / (2.0 * arch.n_layers.max(1) as f32).sqrt();
        let mut p = |name: String, shape: Vec<usize>, data: Vec<f32>| params.push(name, group, shape, data);

        let tok_emb = p(format!("{prefix}tok_emb"), vec![v, d], normal(rng, v * d, 1.0))?;
        let pos_emb = p(format!("{prefix}pos_emb"), vec![arch.max_seq_len, d], normal(rng, arch.max_seq_len * d, 0.5))?;
        let mut blocks = Vec::with_capacity(arch.n_layers);
        for l in 0..arch.n_layers {
            let n = |s: &str| format!("{prefix}h{l}.{s}");
            blocks.push(BlockIds {
                ln1_g: p(n("ln1.g"), vec![d], vec![1.0; d])?,
                ln1_b: p(n("ln1.b"), vec![d], vec![0.0; d])?,
                wq: p(n("attn.q"), vec![d, d], normal(rng, d * d, lin(d)))?,
                wk: p(n("attn.k"), vec![d, d], normal(rng, d * d, lin(d)))?,
                wv: p(n("attn.v"), vec![d, d], normal(rng, d * d, lin(d)))?,
                wo: p(n("attn.o"), vec![d, d], normal(rng, d * d, lin(d) * resid))?,
                ln2_g: p(n("ln2.g"), vec![d], vec![1.0; d])?,
                ln2_b: p(n("ln2.b"), vec![d], vec![0.0; d])?,
                w1: p(n("mlp.w1"), vec![f, d], normal(rng, f * d, lin(d)))?,
                b1: p(n("mlp.b1"), vec![f], vec![0.0; f])?,
                w2: p(n("mlp.w2"), vec![d, f], normal(rng, d * f, lin(f) * resid))?,
                b2: p(n("mlp.b2"), vec![d], vec![0.0; d])?,
                adapters: None,
                lora_q: None,
                lora_v: None,
            });
        }
        let lnf_g = p(format!("{prefix}lnf.g"), vec![d], vec![1.0; d])?;
        let lnf_b = p(format!("{prefix}lnf.b"), vec![d], vec![0.0; d])?;
        Ok(Self { tok_emb, pos_emb, blocks, lnf_g, lnf_b })
    }

    /// Final-layer-norm hidden states, `[rows, d_model]`.
    pub fn forward<F: Real>(
        &self,
        arch: &Arch,
        tape: &mut Tape<F>,
        bind: &mut Binder<'_, F>,
        batch: &Batch,
    ) -> Result<Var> {
        self.forward_with(arch, tape, bind, batch, None)
    }

    /// As [`forward`](Self::forward), with `extra` (`[rows, d_model]`) added
    /// to the input embeddings.
    pub fn forward_with<F: Real>(
        &self,
        arch: &Arch,
        tape: &mut Tape<F>,
        bind: &mut Binder<'_, F>,
        batch: &Batch,
        extra: Option<Var>,
    ) -> Result<Var> {
        batch.check(arch)?;
        let tok = bind.var(tape, self.tok_emb);
        let pos = bind.var(tape, self.pos_emb);
        let te = tape.gather_rows(tok, &batch.tokens)?;
        let pe = tape.gather_rows(pos, &batch.positions)?;
        let mut x = tape.add(te, pe)?;
        if let Some(e) = extra {
            x = tape.add(x, e)?;
        }
        for blk in &self.blocks {
            x = block_forward(arch, blk, tape, bind, batch, x)?;
        }
        let g = bind.var(tape, self.lnf_g);
        let b = bind.var(tape, self.lnf_b);
        tape.layer_norm(x, g, b)
    }
}

/// Keys and values of every token decoded so far, one flat `[len, d]`
/// buffer per layer.
#[derive(Clone, Debug, Default)]
pub(crate) struct KvCache {
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
    len: usize,
}

impl KvCache {
    pub fn len(&self) -> usize {
        self.len
    }
}

impl EncoderIds {
    /// Final hidden state of the next token of a sequence whose earlier tokens
    /// are in `cache`, without a tape. Uses the same kernels as the batched
    /// forward, so rows agree with it.
    pub fn step(&self, arch: &Arch, params: &ParamSet, cache: &mut KvCache, token: usize) -> Result<Vec<f32>> {
        let pos = cache.len;
        if token >= arch.vocab_size || pos >= arch.max_seq_len {
            return Err(PwffError::Index(format!("token {} at position {}", token, pos)));
        }
        if cache.keys.is_empty() {
            cache.keys = vec![Vec::new(); self.blocks.len()];
            cache.values = vec![Vec::new(); self.blocks.len()];
        }
        let d = arch.d_model;
        let te = &params.get(self.tok_emb).data[token * d..(token + 1) * d];
        let pe = &params.get(self.pos_emb).data[pos * d..(pos + 1) * d];
        let mut x: Vec<f32> = te.iter().zip(pe).map(|(a, b)| a + b).collect();
        for (l, blk) in self.blocks.iter().enumerate() {
            let a_in = ln(params, &x, blk.ln1_g, blk.ln1_b);
            let q = lora_vec(params, &a_in, blk.wq, blk.lora_q.as_ref());
            let k = matvec(params, blk.wk, &a_in, None);
            let v = lora_vec(params, &a_in, blk.wv, blk.lora_v.as_ref());
            cache.keys[l].extend_from_slice(&k);
            cache.values[l].extend_from_slice(&v);
            let att = attend(&q, &cache.keys[l], &cache.values[l], arch.n_heads);
            let mut o = matvec(params, blk.wo, &att, None);
            if let Some(ads) = &blk.adapters {
                o = adapter_vec(params, &o, &ads[0]);
            }
            add_into(&mut x, &o);
            let m_in = ln(params, &x, blk.ln2_g, blk.ln2_b);
            let h: Vec<f32> =
                matvec(params, blk.w1, &m_in, Some(blk.b1)).into_iter().map(|z| gelu_tanh(z as f64) as f32).collect();
            let mut h = matvec(params, blk.w2, &h, Some(blk.b2));
            if let Some(ads) = &blk.adapters {
                h = adapter_vec(params, &h, &ads[1]);
            }
            add_into(&mut x, &h);
        }
        cache.len += 1;
        Ok(ln(params, &x, self.lnf_g, self.lnf_b))
    }
}

/// `W·x (+ b)` for `W` stored `[out, in]`.
pub(crate) fn matvec(params: &ParamSet, w: ParamId, x: &[f32], b: Option<ParamId>) -> Vec<f32> {
    let wd = &params.get(w).data;
    let k = x.len();
    let mut y: Vec<f32> = wd.chunks_exact(k).map(|row| dot(row, x)).collect();
    if let Some(b) = b {
        add_into(&mut y, &params.get(b).data);
    }
    y
}

fn add_into(x: &mut [f32], y: &[f32]) {
    for (a, b) in x.iter_mut().zip(y) {
        *a += *b;
    }
}

fn ln(params: &ParamSet, x: &[f32], g: ParamId, b: ParamId) -> Vec<f32> {
    let (g, b) = (&params.get(g).data, &params.get(b).data);
    let n = x.len() as f64;
    let mean = x.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = x.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let rstd = 1.0 / (var + LN_EPS).sqrt();
    x.iter().enumerate().map(|(j, &v)| (((v as f64 - mean) * rstd) as f32) * g[j] + b[j]).collect()
}

fn lora_vec(params: &ParamSet, x: &[f32], w: ParamId, lora: Option<&LoraIds>) -> Vec<f32> {
    let mut y = matvec(params, w, x, None);
    if let Some(l) = lora {
        let ax = matvec(params, l.a, x, None);
        let bax = matvec(params, l.b, &ax, None);
        let delta: Vec<f32> = bax.iter().map(|&v| v * l.scale).collect();
        add_into(&mut y, &delta);
    }
    y
}

fn adapter_vec(params: &ParamSet, h: &[f32], ad: &AdapterIds) -> Vec<f32> {
    let z: Vec<f32> =
        matvec(params, ad.down_w, h, Some(ad.down_b)).into_iter().map(|v| if v > 0.0 { v } else { 0.0 }).collect();
    let u = matvec(params, ad.up_w, &z, Some(ad.up_b));
    let mut out = h.to_vec();
    add_into(&mut out, &u);
    out
}

/// Attention of the newest query over all cached keys and values.
fn attend(q: &[f32], keys: &[f32], values: &[f32], heads: usize) -> Vec<f32> {
    let d = q.len();
    let dh = d / heads;
    let n = keys.len() / d;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0f32; d];
    let mut scores = Vec::with_capacity(n);
    let mut p = vec![0.0f32; n];
    for h in 0..heads {
        let c0 = h * dh;
        let qh = &q[c0..c0 + dh];
        scores.clear();
        for j in 0..n {
            scores.push((dot(qh, &keys[j * d + c0..j * d + c0 + dh]) as f64 * scale) as f32);
        }
        softmax_row(&scores, &mut p);
        let orow = &mut out[c0..c0 + dh];
        for (j, &pj) in p.iter().enumerate() {
            for (o, &vv) in orow.iter_mut().zip(&values[j * d + c0..j * d + c0 + dh]) {
                *o += pj * vv;
            }
        }
    }
    out
}

fn linear<F: Real>(
    tape: &mut Tape<F>,
    bind: &mut Binder<'_, F>,
    x: Var,
    w: ParamId,
    b: Option<ParamId>,
) -> Result<Var> {
    let wv = bind.var(tape, w);
    let y = tape.matmul_nt(x, wv)?;
    match b {
        Some(b) => {
            let bv = bind.var(tape, b);
            tape.add(y, bv)
        }
        None => Ok(y),
    }
}

/// `W·x + scale·B·(A·x)`
fn lora_linear<F: Real>(
    tape: &mut Tape<F>,
    bind: &mut Binder<'_, F>,
    x: Var,
    w: ParamId,
    lora: Option<&LoraIds>,
) -> Result<Var> {
    let base = linear(tape, bind, x, w, None)?;
    match lora {
        Some(l) => {
            let a = bind.var(tape, l.a);
            let b = bind.var(tape, l.b);
            let ax = tape.matmul_nt(x, a)?;
            let bax = tape.matmul_nt(ax, b)?;
            let delta = tape.scale(bax, F::from_f32(l.scale))?;
            tape.add(base, delta)
        }
        None => Ok(base),
    }
}

/// `h + up(relu(down(h)))`
fn adapter<F: Real>(tape: &mut Tape<F>, bind: &mut Binder<'_, F>, h: Var, ad: &AdapterIds) -> Result<Var> {
    let z = linear(tape, bind, h, ad.down_w, Some(ad.down_b))?;
    let z = tape.relu(z)?;
    let u = linear(tape, bind, z, ad.up_w, Some(ad.up_b))?;
    tape.add(h, u)
}

fn block_forward<F: Real>(
    arch: &Arch,
    blk: &BlockIds,
    tape: &mut Tape<F>,
    bind: &mut Binder<'_, F>,
    batch: &Batch,
    x: Var,
) -> Result<Var> {
    let g1 = bind.var(tape, blk.ln1_g);
    let b1 = bind.var(tape, blk.ln1_b);
    let a_in = tape.layer_norm(x, g1, b1)?;
    let q = lora_linear(tape, bind, a_in, blk.wq, blk.lora_q.as_ref())?;
    let k = linear(tape, bind, a_in, blk.wk, None)?;
    let v = lora_linear(tape, bind, a_in, blk.wv, blk.lora_v.as_ref())?;
    let att = tape.causal_attention(q, k, v, arch.n_heads, &batch.segs)?;
    let mut o = linear(tape, bind, att, blk.wo, None)?;
    if let Some(ads) = &blk.adapters {
        o = adapter(tape, bind, o, &ads[0])?;
    }
    let x = tape.add(x, o)?;

    let g2 = bind.var(tape, blk.ln2_g);
    let b2 = bind.var(tape, blk.ln2_b);
    let m_in = tape.layer_norm(x, g2, b2)?;
    let h = linear(tape, bind, m_in, blk.w1, Some(blk.b1))?;
    let h = tape.gelu(h)?;
    let mut h = linear(tape, bind, h, blk.w2, Some(blk.b2))?;
    if let Some(ads) = &blk.adapters {
        h = adapter(tape, bind, h, &ads[1])?;
    }
    tape.add(x, h)
}
