use super::tensor::{
    dot, gelu_tanh, gelu_tanh_grad, log_sigmoid, logsumexp_row, mm, mm_nt, mm_tn_acc, sigmoid, softmax_row, Real,
    Tensor,
};
use crate::error::{PwffError, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Contiguous run of rows `[start, start + len)` treated as one sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

impl Segment {
    pub fn new(start: usize, len: usize) -> Self {
        Self { start, len }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Relu,
    Gelu,
    Sigmoid,
    Tanh,
    Exp,
    LogSigmoid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    Row,
    Scalar,
}

#[derive(Debug)]
enum Op<F> {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    MatMulNt { a: Var, b: Var, m: usize, k: usize, n: usize },
    Binary { kind: Binary, a: Var, b: Var, bc: Bcast },
    Scale { a: Var, c: F },
    Unary { kind: Unary, a: Var },
    Clamp { a: Var, lo: F, hi: F },
    Minimum { a: Var, b: Var },
    Sum { a: Var },
    Mean { a: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, stats: Vec<(f64, f64)> },
    Gather { x: Var, rows: Vec<usize> },
    Attention { q: Var, k: Var, v: Var, heads: usize, segs: Vec<Segment>, probs: Vec<F> },
    CrossEntropy { logits: Var, picks: Vec<(usize, usize)>, probs: Vec<F> },
    LogSoftmaxPick { logits: Var, picks: Vec<(usize, usize)>, probs: Vec<F> },
    Softmax { a: Var },
    SegmentMean { x: Var, segs: Vec<Segment> },
    PrefixMean { x: Var, segs: Vec<Segment> },
}

#[derive(Debug)]
struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// Linear record of a forward pass. Operations append nodes; [`Tape::backward`]
/// replays them in reverse insertion order, visiting each node once.
#[derive(Debug)]
pub struct Tape<F: Real = f32> {
    nodes: Vec<Node<F>>,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

pub(crate) const LN_EPS: f64 = 1e-5;

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn leaf(&mut self, t: Tensor<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, needs_grad: requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, t: Tensor<F>) -> Var {
        self.leaf(t, true)
    }

    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.leaf(t, false)
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, parents: &[Var], name: &'static str) -> Result<Var> {
        if !value.all_finite() {
            return Err(PwffError::NonFinite(name));
        }
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// `a[.., k] · b[k, n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if tb.shape().len() != 2 || ta.cols() != tb.shape()[0] {
            return Err(PwffError::dim("matmul", format!("{:?} x {:?}", ta.shape(), tb.shape())));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.shape()[1]);
        let out = mm(ta.data(), tb.data(), m, k, n);
        let mut shape = ta.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let value = Tensor::new(shape, out)?;
        self.push(value, Op::MatMul { a, b, m, k, n }, &[a, b], "matmul")
    }

    /// `a[.., k] · b[n, k]ᵀ`, the layout of a linear layer with weight `[out, in]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if tb.shape().len() != 2 || ta.cols() != tb.shape()[1] {
            return Err(PwffError::dim("matmul_nt", format!("{:?} x {:?}ᵀ", ta.shape(), tb.shape())));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.shape()[0]);
        let out = mm_nt(ta.data(), tb.data(), m, k, n);
        let mut shape = ta.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let value = Tensor::new(shape, out)?;
        self.push(value, Op::MatMulNt { a, b, m, k, n }, &[a, b], "matmul_nt")
    }

    /// Elementwise binary op. `b` may match `a` exactly, be a single value, or
    /// be a row vector broadcast over the leading dimensions of `a`.
    pub fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let bc = if ta.shape() == tb.shape() {
            Bcast::Same
        } else if tb.numel() == 1 {
            Bcast::Scalar
        } else if tb.shape().len() == 1 && tb.numel() == ta.cols() {
            Bcast::Row
        } else {
            return Err(PwffError::dim(
                "elementwise",
                format!("cannot broadcast {:?} onto {:?}", tb.shape(), ta.shape()),
            ));
        };
        let n = ta.cols();
        let f = |x: F, y: F| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
        };
        let out: Vec<F> = match bc {
            Bcast::Same => ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect(),
            Bcast::Scalar => {
                let y = tb.item();
                ta.data().iter().map(|&x| f(x, y)).collect()
            }
            Bcast::Row => ta.data().iter().enumerate().map(|(i, &x)| f(x, tb.data()[i % n])).collect(),
        };
        let value = Tensor::new(ta.shape().to_vec(), out)?;
        self.push(value, Op::Binary { kind, a, b, bc }, &[a, b], "elementwise")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn scale(&mut self, a: Var, c: F) -> Result<Var> {
        let ta = self.value(a);
        let value = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|&x| x * c).collect())?;
        self.push(value, Op::Scale { a, c }, &[a], "scale")
    }

    pub fn unary(&mut self, kind: Unary, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let out: Vec<F> = ta
            .data()
            .iter()
            .map(|&x| {
                let xf = x.as_f64();
                let y = match kind {
                    Unary::Relu => return if x > F::zero() { x } else { F::zero() },
                    Unary::Gelu => gelu_tanh(xf),
                    Unary::Sigmoid => sigmoid(xf),
                    Unary::Tanh => xf.tanh(),
                    Unary::Exp => xf.exp(),
                    Unary::LogSigmoid => log_sigmoid(xf),
                };
                F::from_f64(y)
            })
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), out)?;
        self.push(value, Op::Unary { kind, a }, &[a], "unary")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Relu, a)
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Gelu, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Sigmoid, a)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Tanh, a)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Exp, a)
    }

    pub fn log_sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::LogSigmoid, a)
    }

    /// Clamp into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&mut self, a: Var, lo: F, hi: F) -> Result<Var> {
        let ta = self.value(a);
        let out = ta.data().iter().map(|&x| x.max(lo).min(hi)).collect();
        let value = Tensor::new(ta.shape().to_vec(), out)?;
        self.push(value, Op::Clamp { a, lo, hi }, &[a], "clamp")
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(PwffError::dim("minimum", format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let out = ta.data().iter().zip(tb.data()).map(|(&x, &y)| if x <= y { x } else { y }).collect();
        let value = Tensor::new(ta.shape().to_vec(), out)?;
        self.push(value, Op::Minimum { a, b }, &[a, b], "minimum")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.value(a).data().iter().map(|v| v.as_f64()).sum();
        self.push(Tensor::scalar(F::from_f64(s)), Op::Sum { a }, &[a], "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.numel() == 0 {
            return Err(PwffError::dim("mean", "empty tensor"));
        }
        let s: f64 = ta.data().iter().map(|v| v.as_f64()).sum::<f64>() / ta.numel() as f64;
        self.push(Tensor::scalar(F::from_f64(s)), Op::Mean { a }, &[a], "mean")
    }

    /// Row-wise layer normalization with affine `gain` and `bias` of width `cols`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let n = tx.cols();
        if tg.numel() != n || tb.numel() != n {
            return Err(PwffError::dim("layer_norm", format!("width {} vs affine {}", n, tg.numel())));
        }
        let mut out = vec![F::zero(); tx.numel()];
        let mut stats = Vec::with_capacity(tx.rows());
        for r in 0..tx.rows() {
            let row = &tx.data()[r * n..(r + 1) * n];
            let mean = row.iter().map(|v| v.as_f64()).sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / n as f64;
            let rstd = 1.0 / (var + LN_EPS).sqrt();
            for j in 0..n {
                let xhat = (row[j].as_f64() - mean) * rstd;
                out[r * n + j] = F::from_f64(xhat) * tg.data()[j] + tb.data()[j];
            }
            stats.push((mean, rstd));
        }
        let value = Tensor::new(tx.shape().to_vec(), out)?;
        self.push(value, Op::LayerNorm { x, gain, bias, stats }, &[x, gain, bias], "layer_norm")
    }

    /// Pick rows of a 2-d tensor (embedding lookup when `x` is a table).
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let (nrows, n) = (tx.rows(), tx.cols());
        let mut out = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            if r >= nrows {
                return Err(PwffError::Index(format!("row {} out of range for {} rows", r, nrows)));
            }
            out.extend_from_slice(&tx.data()[r * n..(r + 1) * n]);
        }
        let value = Tensor::new(vec![rows.len(), n], out)?;
        self.push(value, Op::Gather { x, rows: rows.to_vec() }, &[x], "gather_rows")
    }

    /// Multi-head causal self-attention over independent segments of rows.
    /// `q`, `k`, `v` are `[N, d]` with `d` divisible by `heads`.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, heads: usize, segs: &[Segment]) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let (nr, d) = (tq.rows(), tq.cols());
        if tk.shape() != tq.shape() || tv.shape() != tq.shape() || heads == 0 || d % heads != 0 {
            return Err(PwffError::dim(
                "causal_attention",
                format!("q {:?} k {:?} v {:?} heads {}", tq.shape(), tk.shape(), tv.shape(), heads),
            ));
        }
        check_segments("causal_attention", segs, nr)?;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());
        let mut out = vec![F::zero(); nr * d];
        let mut probs = Vec::new();
        let mut scores = Vec::new();
        let mut p = Vec::new();
        for seg in segs {
            for h in 0..heads {
                let c0 = h * dh;
                for i in 0..seg.len {
                    let qi = &qd[(seg.start + i) * d + c0..(seg.start + i) * d + c0 + dh];
                    scores.clear();
                    for j in 0..=i {
                        let kj = &kd[(seg.start + j) * d + c0..(seg.start + j) * d + c0 + dh];
                        scores.push(F::from_f64(dot(qi, kj).as_f64() * scale));
                    }
                    p.resize(i + 1, F::zero());
                    softmax_row(&scores, &mut p);
                    let orow = &mut out[(seg.start + i) * d + c0..(seg.start + i) * d + c0 + dh];
                    for (j, &pij) in p.iter().enumerate() {
                        let vj = &vd[(seg.start + j) * d + c0..(seg.start + j) * d + c0 + dh];
                        for (o, &vv) in orow.iter_mut().zip(vj) {
                            *o = *o + pij * vv;
                        }
                    }
                    probs.extend_from_slice(&p);
                    probs.extend(std::iter::repeat_n(F::zero(), seg.len - i - 1));
                }
            }
        }
        let value = Tensor::new(vec![nr, d], out)?;
        self.push(value, Op::Attention { q, k, v, heads, segs: segs.to_vec(), probs }, &[q, k, v], "causal_attention")
    }

    /// Mean of `−log softmax(logits[row])[target]` over the listed `(row, target)` picks.
    pub fn cross_entropy(&mut self, logits: Var, picks: &[(usize, usize)]) -> Result<Var> {
        let tl = self.value(logits);
        let (nr, v) = (tl.rows(), tl.cols());
        if picks.is_empty() {
            return Err(PwffError::dim("cross_entropy", "no target positions"));
        }
        let mut total = 0.0f64;
        let mut probs = vec![F::zero(); picks.len() * v];
        for (p, &(r, t)) in picks.iter().enumerate() {
            if r >= nr {
                return Err(PwffError::Index(format!("row {} out of range for {} rows", r, nr)));
            }
            if t >= v {
                return Err(PwffError::Index(format!("target {} >= vocabulary size {}", t, v)));
            }
            let row = &tl.data()[r * v..(r + 1) * v];
            total += logsumexp_row(row) - row[t].as_f64();
            softmax_row(row, &mut probs[p * v..(p + 1) * v]);
        }
        let loss = F::from_f64(total / picks.len() as f64);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, picks: picks.to_vec(), probs },
            &[logits],
            "cross_entropy",
        )
    }

    /// Single-vector cross entropy: `−log softmax(logits)[target]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        if self.value(logits).shape().len() != 1 {
            return Err(PwffError::dim(
                "softmax_cross_entropy",
                format!("expected rank-1 logits, got {:?}", self.value(logits).shape()),
            ));
        }
        self.cross_entropy(logits, &[(0, target)])
    }

    /// Log-probabilities `log softmax(logits[row])[id]` for each pick, as a `[picks]` vector.
    pub fn log_softmax_pick(&mut self, logits: Var, picks: &[(usize, usize)]) -> Result<Var> {
        let tl = self.value(logits);
        let (nr, v) = (tl.rows(), tl.cols());
        let mut out = Vec::with_capacity(picks.len());
        let mut probs = vec![F::zero(); picks.len() * v];
        for (p, &(r, t)) in picks.iter().enumerate() {
            if r >= nr || t >= v {
                return Err(PwffError::Index(format!("pick ({}, {}) outside [{}, {}]", r, t, nr, v)));
            }
            let row = &tl.data()[r * v..(r + 1) * v];
            out.push(F::from_f64(row[t].as_f64() - logsumexp_row(row)));
            softmax_row(row, &mut probs[p * v..(p + 1) * v]);
        }
        let value = Tensor::new(vec![picks.len()], out)?;
        self.push(value, Op::LogSoftmaxPick { logits, picks: picks.to_vec(), probs }, &[logits], "log_softmax_pick")
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let n = ta.cols();
        let mut out = vec![F::zero(); ta.numel()];
        for r in 0..ta.rows() {
            softmax_row(&ta.data()[r * n..(r + 1) * n], &mut out[r * n..(r + 1) * n]);
        }
        let value = Tensor::new(ta.shape().to_vec(), out)?;
        self.push(value, Op::Softmax { a }, &[a], "softmax")
    }

    /// Mean of the rows of each segment: `[N, d]` to `[segments, d]`.
    pub fn segment_mean(&mut self, x: Var, segs: &[Segment]) -> Result<Var> {
        let tx = self.value(x);
        let d = tx.cols();
        check_segments("segment_mean", segs, tx.rows())?;
        let mut out = vec![F::zero(); segs.len() * d];
        for (s, seg) in segs.iter().enumerate() {
            if seg.len == 0 {
                return Err(PwffError::dim("segment_mean", "empty segment"));
            }
            let mut acc = vec![0.0f64; d];
            for r in seg.start..seg.start + seg.len {
                for (a, v) in acc.iter_mut().zip(&tx.data()[r * d..(r + 1) * d]) {
                    *a += v.as_f64();
                }
            }
            for (o, a) in out[s * d..(s + 1) * d].iter_mut().zip(&acc) {
                *o = F::from_f64(a / seg.len as f64);
            }
        }
        let value = Tensor::new(vec![segs.len(), d], out)?;
        self.push(value, Op::SegmentMean { x, segs: segs.to_vec() }, &[x], "segment_mean")
    }

    /// Running mean within each segment: row `i` holds the mean of rows `start..=i`.
    pub fn prefix_mean(&mut self, x: Var, segs: &[Segment]) -> Result<Var> {
        let tx = self.value(x);
        let d = tx.cols();
        check_segments("prefix_mean", segs, tx.rows())?;
        let mut out = vec![F::zero(); tx.numel()];
        for seg in segs {
            let mut acc = vec![0.0f64; d];
            for i in 0..seg.len {
                let r = seg.start + i;
                for (j, a) in acc.iter_mut().enumerate() {
                    *a += tx.data()[r * d + j].as_f64();
                    out[r * d + j] = F::from_f64(*a / (i + 1) as f64);
                }
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), out)?;
        self.push(value, Op::PrefixMean { x, segs: segs.to_vec() }, &[x], "prefix_mean")
    }

    /// Reverse-mode pass from a scalar `loss`. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients<F>> {
        let nodes = self.nodes;
        if loss.0 >= nodes.len() {
            return Err(PwffError::Contract("loss is not on this tape".into()));
        }
        if nodes[loss.0].value.numel() != 1 {
            return Err(PwffError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![F::one()]);

        for i in (0..=loss.0).rev() {
            if !nodes[i].needs_grad {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            backprop_node(&nodes, i, &g, &mut grads);
            grads[i] = Some(g);
        }

        let lens = nodes.iter().map(|n| n.value.numel()).collect();
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, lens, shapes })
    }
}

fn check_segments(op: &'static str, segs: &[Segment], rows: usize) -> Result<()> {
    for s in segs {
        if s.start + s.len > rows {
            return Err(PwffError::dim(op, format!("segment {:?} exceeds {} rows", s, rows)));
        }
    }
    Ok(())
}

fn acc<'a, F: Real>(grads: &'a mut [Option<Vec<F>>], nodes: &[Node<F>], v: Var) -> Option<&'a mut Vec<F>> {
    if !nodes[v.0].needs_grad {
        return None;
    }
    let len = nodes[v.0].value.numel();
    Some(grads[v.0].get_or_insert_with(|| vec![F::zero(); len]))
}

fn add_into<F: Real>(grads: &mut [Option<Vec<F>>], nodes: &[Node<F>], v: Var, delta: &[F]) {
    if let Some(gv) = acc(grads, nodes, v) {
        for (a, &d) in gv.iter_mut().zip(delta) {
            *a = *a + d;
        }
    }
}

fn backprop_node<F: Real>(nodes: &[Node<F>], i: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
    let out = &nodes[i].value;
    let val = |v: Var| &nodes[v.0].value;
    match &nodes[i].op {
        Op::Leaf => {}
        &Op::MatMul { a, b, m, k, n } => {
            if nodes[a.0].needs_grad {
                let da = mm_nt(g, val(b).data(), m, n, k);
                add_into(grads, nodes, a, &da);
            }
            if let Some(gb) = acc(grads, nodes, b) {
                mm_tn_acc(val(a).data(), g, m, k, n, gb);
            }
        }
        &Op::MatMulNt { a, b, m, k, n } => {
            if nodes[a.0].needs_grad {
                let da = mm(g, val(b).data(), m, n, k);
                add_into(grads, nodes, a, &da);
            }
            if let Some(gb) = acc(grads, nodes, b) {
                mm_tn_acc(g, val(a).data(), m, n, k, gb);
            }
        }
        &Op::Binary { kind, a, b, bc } => {
            let (ta, tb) = (val(a), val(b));
            let n = ta.cols();
            let bval = |idx: usize| match bc {
                Bcast::Same => tb.data()[idx],
                Bcast::Scalar => tb.item(),
                Bcast::Row => tb.data()[idx % n],
            };
            if nodes[a.0].needs_grad {
                let da: Vec<F> = match kind {
                    Binary::Add | Binary::Sub => g.to_vec(),
                    Binary::Mul => g.iter().enumerate().map(|(j, &gv)| gv * bval(j)).collect(),
                };
                add_into(grads, nodes, a, &da);
            }
            if let Some(gb) = acc(grads, nodes, b) {
                for (j, &gv) in g.iter().enumerate() {
                    let d = match kind {
                        Binary::Add => gv,
                        Binary::Sub => -gv,
                        Binary::Mul => gv * ta.data()[j],
                    };
                    let slot = match bc {
                        Bcast::Same => j,
                        Bcast::Scalar => 0,
                        Bcast::Row => j % n,
                    };
                    gb[slot] = gb[slot] + d;
                }
            }
        }
        &Op::Scale { a, c } => {
            let da: Vec<F> = g.iter().map(|&gv| gv * c).collect();
            add_into(grads, nodes, a, &da);
        }
        &Op::Unary { kind, a } => {
            let x = val(a).data();
            let y = out.data();
            let da: Vec<F> = g
                .iter()
                .enumerate()
                .map(|(j, &gv)| {
                    let d = match kind {
                        Unary::Relu => {
                            return if x[j] > F::zero() { gv } else { F::zero() };
                        }
                        Unary::Gelu => gelu_tanh_grad(x[j].as_f64()),
                        Unary::Sigmoid => {
                            let s = y[j].as_f64();
                            s * (1.0 - s)
                        }
                        Unary::Tanh => {
                            let t = y[j].as_f64();
                            1.0 - t * t
                        }
                        Unary::Exp => y[j].as_f64(),
                        Unary::LogSigmoid => sigmoid(-x[j].as_f64()),
                    };
                    F::from_f64(gv.as_f64() * d)
                })
                .collect();
            add_into(grads, nodes, a, &da);
        }
        &Op::Clamp { a, lo, hi } => {
            let x = val(a).data();
            let da: Vec<F> =
                g.iter().zip(x).map(|(&gv, &xv)| if xv < lo || xv > hi { F::zero() } else { gv }).collect();
            add_into(grads, nodes, a, &da);
        }
        &Op::Minimum { a, b } => {
            let (xa, xb) = (val(a).data(), val(b).data());
            let pick_a: Vec<bool> = xa.iter().zip(xb).map(|(x, y)| x <= y).collect();
            let da: Vec<F> = g.iter().zip(&pick_a).map(|(&gv, &p)| if p { gv } else { F::zero() }).collect();
            let db: Vec<F> = g.iter().zip(&pick_a).map(|(&gv, &p)| if p { F::zero() } else { gv }).collect();
            add_into(grads, nodes, a, &da);
            add_into(grads, nodes, b, &db);
        }
        &Op::Sum { a } => {
            let da = vec![g[0]; val(a).numel()];
            add_into(grads, nodes, a, &da);
        }
        &Op::Mean { a } => {
            let n = val(a).numel();
            let da = vec![F::from_f64(g[0].as_f64() / n as f64); n];
            add_into(grads, nodes, a, &da);
        }
        Op::LayerNorm { x, gain, bias, stats } => {
            let tx = val(*x);
            let gam = val(*gain).data();
            let n = tx.cols();
            let mut dx = vec![F::zero(); tx.numel()];
            let mut dg = vec![0.0f64; n];
            let mut db = vec![0.0f64; n];
            let mut xhat = vec![0.0f64; n];
            let mut dxhat = vec![0.0f64; n];
            for (r, &(mean, rstd)) in stats.iter().enumerate() {
                let row = &tx.data()[r * n..(r + 1) * n];
                let grow = &g[r * n..(r + 1) * n];
                let (mut m1, mut m2) = (0.0, 0.0);
                for j in 0..n {
                    xhat[j] = (row[j].as_f64() - mean) * rstd;
                    let gj = grow[j].as_f64();
                    dg[j] += gj * xhat[j];
                    db[j] += gj;
                    dxhat[j] = gj * gam[j].as_f64();
                    m1 += dxhat[j];
                    m2 += dxhat[j] * xhat[j];
                }
                m1 /= n as f64;
                m2 /= n as f64;
                for j in 0..n {
                    dx[r * n + j] = F::from_f64(rstd * (dxhat[j] - m1 - xhat[j] * m2));
                }
            }
            add_into(grads, nodes, *x, &dx);
            let dg: Vec<F> = dg.into_iter().map(F::from_f64).collect();
            let db: Vec<F> = db.into_iter().map(F::from_f64).collect();
            add_into(grads, nodes, *gain, &dg);
            add_into(grads, nodes, *bias, &db);
        }
        Op::Gather { x, rows } => {
            let n = val(*x).cols();
            if let Some(gx) = acc(grads, nodes, *x) {
                for (o, &r) in rows.iter().enumerate() {
                    for j in 0..n {
                        gx[r * n + j] = gx[r * n + j] + g[o * n + j];
                    }
                }
            }
        }
        Op::Attention { q, k, v, heads, segs, probs } => {
            let (qd, kd, vd) = (val(*q).data(), val(*k).data(), val(*v).data());
            let d = val(*q).cols();
            let dh = d / heads;
            let scale = 1.0 / (dh as f64).sqrt();
            let mut dq = vec![F::zero(); qd.len()];
            let mut dk = vec![F::zero(); kd.len()];
            let mut dv = vec![F::zero(); vd.len()];
            let mut off = 0;
            let mut dp = Vec::new();
            for seg in segs {
                for h in 0..*heads {
                    let c0 = h * dh;
                    let block = &probs[off..off + seg.len * seg.len];
                    off += seg.len * seg.len;
                    for i in 0..seg.len {
                        let ri = (seg.start + i) * d + c0;
                        let go = &g[ri..ri + dh];
                        let prow = &block[i * seg.len..i * seg.len + i + 1];
                        dp.clear();
                        for j in 0..=i {
                            let rj = (seg.start + j) * d + c0;
                            dp.push(dot(go, &vd[rj..rj + dh]).as_f64());
                            axpy_acc(prow[j], go, &mut dv[rj..rj + dh]);
                        }
                        let rowdot: f64 = prow.iter().zip(&dp).map(|(p, x)| p.as_f64() * x).sum();
                        for j in 0..=i {
                            let rj = (seg.start + j) * d + c0;
                            let ds = F::from_f64(prow[j].as_f64() * (dp[j] - rowdot) * scale);
                            if ds != F::zero() {
                                let (kj, qi) = (&kd[rj..rj + dh], &qd[ri..ri + dh]);
                                axpy_acc(ds, kj, &mut dq[ri..ri + dh]);
                                axpy_acc(ds, qi, &mut dk[rj..rj + dh]);
                            }
                        }
                    }
                }
            }
            add_into(grads, nodes, *q, &dq);
            add_into(grads, nodes, *k, &dk);
            add_into(grads, nodes, *v, &dv);
        }
        Op::CrossEntropy { logits, picks, probs } => {
            let v = val(*logits).cols();
            let coef = g[0].as_f64() / picks.len() as f64;
            if let Some(gl) = acc(grads, nodes, *logits) {
                for (p, &(r, t)) in picks.iter().enumerate() {
                    for j in 0..v {
                        let onehot = if j == t { 1.0 } else { 0.0 };
                        let d = (probs[p * v + j].as_f64() - onehot) * coef;
                        gl[r * v + j] = gl[r * v + j] + F::from_f64(d);
                    }
                }
            }
        }
        Op::LogSoftmaxPick { logits, picks, probs } => {
            let v = val(*logits).cols();
            if let Some(gl) = acc(grads, nodes, *logits) {
                for (p, &(r, t)) in picks.iter().enumerate() {
                    let gp = g[p].as_f64();
                    for j in 0..v {
                        let onehot = if j == t { 1.0 } else { 0.0 };
                        let d = gp * (onehot - probs[p * v + j].as_f64());
                        gl[r * v + j] = gl[r * v + j] + F::from_f64(d);
                    }
                }
            }
        }
        &Op::Softmax { a } => {
            let n = out.cols();
            let y = out.data();
            let mut da = vec![F::zero(); y.len()];
            for r in 0..out.rows() {
                let yr = &y[r * n..(r + 1) * n];
                let gr = &g[r * n..(r + 1) * n];
                let s: f64 = yr.iter().zip(gr).map(|(a, b)| a.as_f64() * b.as_f64()).sum();
                for j in 0..n {
                    da[r * n + j] = F::from_f64(yr[j].as_f64() * (gr[j].as_f64() - s));
                }
            }
            add_into(grads, nodes, a, &da);
        }
        Op::SegmentMean { x, segs } => {
            let d = val(*x).cols();
            if let Some(gx) = acc(grads, nodes, *x) {
                for (s, seg) in segs.iter().enumerate() {
                    let inv = 1.0 / seg.len as f64;
                    for r in seg.start..seg.start + seg.len {
                        for j in 0..d {
                            gx[r * d + j] = gx[r * d + j] + F::from_f64(g[s * d + j].as_f64() * inv);
                        }
                    }
                }
            }
        }
        Op::PrefixMean { x, segs } => {
            let d = val(*x).cols();
            if let Some(gx) = acc(grads, nodes, *x) {
                let mut run = vec![0.0f64; d];
                for seg in segs {
                    run.iter_mut().for_each(|v| *v = 0.0);
                    for i in (0..seg.len).rev() {
                        let r = seg.start + i;
                        for j in 0..d {
                            run[j] += g[r * d + j].as_f64() / (i + 1) as f64;
                            gx[r * d + j] = gx[r * d + j] + F::from_f64(run[j]);
                        }
                    }
                }
            }
        }
    }
}

#[inline]
fn axpy_acc<F: Real>(alpha: F, x: &[F], y: &mut [F]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv = *yv + alpha * xv;
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<F> {
    grads: Vec<Option<Vec<F>>>,
    lens: Vec<usize>,
    shapes: Vec<Vec<usize>>,
}

impl<F: Real> Gradients<F> {
    /// Gradient of `v`, or `None` if the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&[F]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v` materialized; zeros when disconnected.
    pub fn wrt(&self, v: Var) -> Tensor<F> {
        let data = match self.get(v) {
            Some(g) => g.to_vec(),
            None => vec![F::zero(); self.lens[v.0]],
        };
        Tensor::new(self.shapes[v.0].clone(), data).expect("gradient shape matches value")
    }
}
