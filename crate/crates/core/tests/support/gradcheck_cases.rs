//! Central-difference gradient checks in f64 for every differentiable tape
//! operation and for a full micro-transformer loss. Each function panics on
//! the first mismatch and returns the number of cases it checked.

use pwff_core::autodiff::{Segment, Tape, Tensor, Var};
use pwff_core::model::{Batch, Binder, LanguageModel, ModelConfig, ParamGroup};
use pwff_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::sync::atomic::{AtomicUsize, Ordering};

static CASES_CHECKED: AtomicUsize = AtomicUsize::new(0);

const STEP: f64 = 1e-3;
const REL: f64 = 1e-4;
const ABS: f64 = 1e-6;

type Build = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>;

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Values bounded away from zero, for ops with a kink there.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.05..1.5);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn eval(build: &Build, inputs: &[Tensor<f64>]) -> f64 {
    let mut tape = Tape::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = build(&mut tape, &vars).unwrap();
    tape.value(loss).item()
}

/// Compare analytic and numeric gradients for every input coordinate.
fn check(name: &str, build: &Build, inputs: Vec<Tensor<f64>>) {
    let mut tape = Tape::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = build(&mut tape, &vars).unwrap();
    let grads = tape.backward(loss).unwrap();
    CASES_CHECKED.fetch_add(1, Ordering::Relaxed);
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.wrt(*v);
        for i in 0..inputs[k].numel() {
            let mut plus = inputs.clone();
            plus[k].data_mut()[i] += STEP;
            let mut minus = inputs.clone();
            minus[k].data_mut()[i] -= STEP;
            let numeric = (eval(build, &plus) - eval(build, &minus)) / (2.0 * STEP);
            let a = analytic.data()[i];
            let err = (a - numeric).abs();
            let scale = a.abs().max(numeric.abs());
            assert!(err <= REL * scale + ABS, "{}: input {} coord {}: analytic {} numeric {}", name, k, i, a, numeric);
        }
    }
}

/// Reduce a tensor to a scalar through a fixed random weighting, so every
/// output coordinate contributes a distinct gradient.
fn weighted_sum(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let shape = tape.value(y).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
    let w = tape.constant(random(&mut rng, &shape, -1.0, 1.0));
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

const CASES: u64 = 8;

pub fn matmul_gradients() {
    for s in 0..CASES {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let (m, k, n) = (rng.gen_range(1..4), rng.gen_range(1..5), rng.gen_range(1..4));
        let inputs = vec![random(&mut rng, &[m, k], -1.0, 1.0), random(&mut rng, &[k, n], -1.0, 1.0)];
        check(
            "matmul",
            &move |t, v| {
                let y = t.matmul(v[0], v[1])?;
                weighted_sum(t, y, s)
            },
            inputs.clone(),
        );
        let inputs = vec![inputs[0].clone(), random(&mut rng, &[n, k], -1.0, 1.0)];
        check(
            "matmul_nt",
            &move |t, v| {
                let y = t.matmul_nt(v[0], v[1])?;
                weighted_sum(t, y, s)
            },
            inputs,
        );
    }
}

pub fn elementwise_binary_gradients() {
    for s in 0..CASES {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + s);
        let shape = [rng.gen_range(1..4), rng.gen_range(1..5)];
        let a = random(&mut rng, &shape, -1.0, 1.0);
        let same = random(&mut rng, &shape, -1.0, 1.0);
        let row = random(&mut rng, &[shape[1]], -1.0, 1.0);
        let scalar = random(&mut rng, &[1], -1.0, 1.0);
        for b in [same, row, scalar] {
            check(
                "add",
                &move |t, v| {
                    let y = t.add(v[0], v[1])?;
                    weighted_sum(t, y, s)
                },
                vec![a.clone(), b.clone()],
            );
            check(
                "sub",
                &move |t, v| {
                    let y = t.sub(v[0], v[1])?;
                    weighted_sum(t, y, s)
                },
                vec![a.clone(), b.clone()],
            );
            check(
                "mul",
                &move |t, v| {
                    let y = t.mul(v[0], v[1])?;
                    weighted_sum(t, y, s)
                },
                vec![a.clone(), b.clone()],
            );
        }
        let c = rng.gen_range(-2.0..2.0);
        check(
            "scale",
            &move |t, v| {
                let y = t.scale(v[0], c)?;
                weighted_sum(t, y, s)
            },
            vec![a.clone()],
        );
    }
}

pub fn unary_gradients() {
    for s in 0..CASES {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + s);
        let shape = [rng.gen_range(1..4), rng.gen_range(1..5)];
        let x = away_from_zero(&mut rng, &shape);
        check(
            "relu",
            &move |t, v| {
                let y = t.relu(v[0])?;
                weighted_sum(t, y, s)
            },
            vec![x.clone()],
        );
        check(
            "gelu",
            &move |t, v| {
                let y = t.gelu(v[0])?;
                weighted_sum(t, y, s)
            },
            vec![x.clone()],
        );
        check(
            "sigmoid",
            &move |t, v| {
                let y = t.sigmoid(v[0])?;
                weighted_sum(t, y, s)
            },
            vec![x.clone()],
        );
        check(
            "tanh",
            &move |t, v| {
                let y = t.tanh(v[0])?;
                weighted_sum(t, y, s)
            },
            vec![x.clone()],
        );
        check(
            "exp",
            &move |t, v| {
                let y = t.exp(v[0])?;
                weighted_sum(t, y, s)
            },
            vec![x.clone()],
        );
        check(
            "log_sigmoid",
            &move |t, v| {
                let y = t.log_sigmoid(v[0])?;
                weighted_sum(t, y, s)
            },
            vec![x.clone()],
        );
        // Bounds sit between grid values so no coordinate is within a step of a kink.
        check(
            "clamp",
            &move |t, v| {
                let y = t.clamp(v[0], -0.8, 0.8)?;
                weighted_sum(t, y, s)
            },
            vec![shifted_off(&x, &[-0.8, 0.8])],
        );
    }
}

fn shifted_off(x: &Tensor<f64>, kinks: &[f64]) -> Tensor<f64> {
    let mut out = x.clone();
    for v in out.data_mut() {
        for &k in kinks {
            if (*v - k).abs() < 0.02 {
                *v = k + 0.05;
            }
        }
    }
    out
}

pub fn minimum_gradients() {
    for s in 0..CASES {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + s);
        let shape = [rng.gen_range(1..4), rng.gen_range(1..5)];
        let a = random(&mut rng, &shape, -1.0, 1.0);
        let mut b = random(&mut rng, &shape, -1.0, 1.0);
        for (bv, av) in b.data_mut().iter_mut().zip(a.data()) {
            if (*bv - av).abs() < 0.02 {
                *bv = av + 0.1;
            }
        }
        check(
            "minimum",
            &move |t, v| {
                let y = t.minimum(v[0], v[1])?;
                weighted_sum(t, y, s)
            },
            vec![a, b],
        );
    }
}

pub fn reduction_and_row_gradients() {
    for s in 0..CASES {
        let mut rng = ChaCha8Rng::seed_from_u64(400 + s);
        let shape = [rng.gen_range(1..5), rng.gen_range(2..6)];
        let x = random(&mut rng, &shape, -1.0, 1.0);
        check("sum", &|t, v| t.sum(v[0]), vec![x.clone()]);
        check("mean", &|t, v| t.mean(v[0]), vec![x.clone()]);
        check(
            "softmax",
            &move |t, v| {
                let y = t.softmax(v[0])?;
                weighted_sum(t, y, s)
            },
            vec![x.clone()],
        );
        let gain = random(&mut rng, &[shape[1]], 0.5, 1.5);
        let bias = random(&mut rng, &[shape[1]], -0.5, 0.5);
        check(
            "layer_norm",
            &move |t, v| {
                let y = t.layer_norm(v[0], v[1], v[2])?;
                weighted_sum(t, y, s)
            },
            vec![x.clone(), gain, bias],
        );
        let rows: Vec<usize> = (0..5).map(|_| rng.gen_range(0..shape[0])).collect();
        check(
            "gather_rows",
            &move |t, v| {
                let y = t.gather_rows(v[0], &rows)?;
                weighted_sum(t, y, s)
            },
            vec![x.clone()],
        );
    }
}

fn random_segments(rng: &mut ChaCha8Rng) -> (Vec<Segment>, usize) {
    let mut segs = Vec::new();
    let mut start = 0;
    for _ in 0..rng.gen_range(1..4) {
        let len = rng.gen_range(1..5);
        segs.push(Segment::new(start, len));
        start += len;
    }
    (segs, start)
}

pub fn segment_op_gradients() {
    for s in 0..CASES {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + s);
        let (segs, rows) = random_segments(&mut rng);
        let d = rng.gen_range(1..5);
        let x = random(&mut rng, &[rows, d], -1.0, 1.0);
        let sg = segs.clone();
        check(
            "segment_mean",
            &move |t, v| {
                let y = t.segment_mean(v[0], &sg)?;
                weighted_sum(t, y, s)
            },
            vec![x.clone()],
        );
        let sg = segs.clone();
        check(
            "prefix_mean",
            &move |t, v| {
                let y = t.prefix_mean(v[0], &sg)?;
                weighted_sum(t, y, s)
            },
            vec![x.clone()],
        );

        let heads = rng.gen_range(1..3);
        let d = heads * rng.gen_range(1..4);
        let qkv: Vec<Tensor<f64>> = (0..3).map(|_| random(&mut rng, &[rows, d], -1.0, 1.0)).collect();
        check(
            "causal_attention",
            &move |t, v| {
                let y = t.causal_attention(v[0], v[1], v[2], heads, &segs)?;
                weighted_sum(t, y, s)
            },
            qkv,
        );
    }
}

pub fn likelihood_gradients() {
    for s in 0..CASES {
        let mut rng = ChaCha8Rng::seed_from_u64(600 + s);
        let (r, c) = (rng.gen_range(1..4), rng.gen_range(2..6));
        let logits = random(&mut rng, &[r, c], -2.0, 2.0);
        let picks: Vec<(usize, usize)> = (0..4).map(|_| (rng.gen_range(0..r), rng.gen_range(0..c))).collect();
        let p = picks.clone();
        check("cross_entropy", &move |t, v| t.cross_entropy(v[0], &p), vec![logits.clone()]);
        check(
            "log_softmax_pick",
            &move |t, v| {
                let y = t.log_softmax_pick(v[0], &picks)?;
                weighted_sum(t, y, s)
            },
            vec![logits.clone()],
        );
        let target = rng.gen_range(0..c);
        let vector = random(&mut rng, &[c], -2.0, 2.0);
        check("softmax_cross_entropy", &move |t, v| t.softmax_cross_entropy(v[0], target), vec![vector]);
    }
}

pub fn composite_chain_gradient() {
    // Shared subexpressions exercise gradient accumulation across uses.
    for s in 0..CASES {
        let mut rng = ChaCha8Rng::seed_from_u64(700 + s);
        let x = random(&mut rng, &[3, 4], -1.0, 1.0);
        let w = random(&mut rng, &[4, 4], -0.5, 0.5);
        check(
            "chain",
            &move |t, v| {
                let h = t.matmul(v[0], v[1])?;
                let g = t.tanh(h)?;
                let m = t.mul(g, h)?;
                let z = t.add(m, v[0])?;
                let y = t.sigmoid(z)?;
                weighted_sum(t, y, s)
            },
            vec![x, w],
        );
    }
}

fn micro_model(seed: u64) -> LanguageModel {
    let cfg = ModelConfig {
        vocab_size: 7,
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        d_ff: 12,
        max_seq_len: 6,
        adapter_bottleneck: 3,
        lora_rank: 2,
        lora_alpha: 4.0,
    };
    let base = LanguageModel::new(&cfg, seed).unwrap();
    base.insert_peft(&cfg.peft(), seed + 1).unwrap()
}

fn model_loss(model: &LanguageModel, values: &[Tensor<f64>], seqs: &[Vec<usize>], picks: &[(usize, usize)]) -> f64 {
    let mut tape = Tape::<f64>::new();
    let mut bind = Binder::<f64>::new(model.params(), &ParamGroup::ALL);
    for (id, v) in model.params().ids_in(&ParamGroup::ALL).into_iter().zip(values) {
        bind.set_override(id, v.clone());
    }
    let logits = model.forward(&mut tape, &mut bind, &Batch::new(seqs)).unwrap();
    let loss = tape.cross_entropy(logits, picks).unwrap();
    tape.value(loss).item()
}

pub fn micro_transformer_loss_gradient() {
    // Every tensor, including the zero-initialized PEFT ones, gets random
    // values through overrides so no gradient path is trivially zero.
    for s in 0..3u64 {
        let model = micro_model(s);
        let mut rng = ChaCha8Rng::seed_from_u64(800 + s);
        let seqs: Vec<Vec<usize>> = vec![vec![1, 4, 2, 0, 5], vec![3, 6, 1]];
        let picks = [(0, 4), (1, 2), (2, 0), (3, 5), (5, 6), (6, 1)];
        let ids = model.params().ids_in(&ParamGroup::ALL);
        let values: Vec<Tensor<f64>> =
            model.params().entries().iter().map(|e| random(&mut rng, &e.shape, -0.5, 0.5)).collect();

        let mut tape = Tape::<f64>::new();
        let mut bind = Binder::<f64>::new(model.params(), &ParamGroup::ALL);
        for (id, v) in ids.iter().zip(&values) {
            bind.set_override(*id, v.clone());
        }
        let logits = model.forward(&mut tape, &mut bind, &Batch::new(&seqs)).unwrap();
        let loss = tape.cross_entropy(logits, &picks).unwrap();
        let vars: Vec<Var> = ids.iter().map(|id| bind.bound(*id).expect("every tensor is used")).collect();
        let grads = tape.backward(loss).unwrap();

        let mut checked = 0;
        for (k, var) in vars.iter().enumerate() {
            let analytic = grads.wrt(*var);
            let n = values[k].numel();
            for _ in 0..n.min(6) {
                let i = rng.gen_range(0..n);
                let mut plus = values.clone();
                plus[k].data_mut()[i] += STEP;
                let mut minus = values.clone();
                minus[k].data_mut()[i] -= STEP;
                let numeric = (model_loss(&model, &plus, &seqs, &picks) - model_loss(&model, &minus, &seqs, &picks))
                    / (2.0 * STEP);
                let a = analytic.data()[i];
                assert!(
                    (a - numeric).abs() <= REL * a.abs().max(numeric.abs()) + ABS,
                    "{} coord {}: analytic {} numeric {}",
                    model.params().entries()[k].name,
                    i,
                    a,
                    numeric
                );
                checked += 1;
            }
        }
        assert!(checked > 50);
        CASES_CHECKED.fetch_add(1, Ordering::Relaxed);
    }
}

/// Run every group and return how many random cases were checked.
pub fn run_all() -> usize {
    let before = CASES_CHECKED.load(Ordering::Relaxed);
    matmul_gradients();
    elementwise_binary_gradients();
    unary_gradients();
    minimum_gradients();
    reduction_and_row_gradients();
    segment_op_gradients();
    likelihood_gradients();
    composite_chain_gradient();
    micro_transformer_loss_gradient();
    CASES_CHECKED.load(Ordering::Relaxed) - before
}
