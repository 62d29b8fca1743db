//! Brute-force checks of weighted aggregation, shared with the acceptance suite.

use pwff_core::fed::{aggregate, Scheme, Upload};
use pwff_core::model::{FlatParams, ParamGroup, ParamSet};
use pwff_core::rng;
use rand::seq::SliceRandom;
use rand::Rng;

fn flat(values: Vec<f32>) -> FlatParams {
    let mut p = ParamSet::new();
    let n = values.len();
    p.push("v", ParamGroup::Adapter, vec![n], values).unwrap();
    p.flatten(&[ParamGroup::Adapter])
}

fn random_uploads(seed: u64) -> Vec<Upload> {
    let mut r = rng::stream(seed, "agg-case", 0);
    let clients = r.gen_range(1..8);
    let len = r.gen_range(1..16);
    let mut ids: Vec<usize> = (0..20).collect();
    ids.shuffle(&mut r);
    (0..clients)
        .map(|k| Upload {
            client: ids[k],
            flat: flat((0..len).map(|_| r.gen_range(-10.0f32..10.0)).collect()),
            data_size: r.gen_range(1..500),
        })
        .collect()
}

/// Per-element weighted mean, clients in ascending id, accumulated in f64.
fn oracle(uploads: &[Upload], scheme: Scheme) -> Vec<f32> {
    let mut sorted: Vec<&Upload> = uploads.iter().collect();
    sorted.sort_by_key(|u| u.client);
    let weight = |u: &Upload| match scheme {
        Scheme::Uniform => 1.0,
        Scheme::DataSize => u.data_size as f64,
    };
    let total: f64 = sorted.iter().map(|u| weight(u)).sum();
    (0..sorted[0].flat.values.len())
        .map(|i| {
            let mut s = 0.0f64;
            for u in &sorted {
                s += (weight(u) / total) * u.flat.values[i] as f64;
            }
            s as f32
        })
        .collect()
}

fn bits(v: &[f32]) -> Vec<u32> {
    v.iter().map(|x| x.to_bits()).collect()
}

/// `cases` random upload sets under both schemes; returns the number checked.
pub fn matches_oracle(cases: usize) -> usize {
    for seed in 0..cases as u64 {
        let ups = random_uploads(seed);
        for scheme in [Scheme::Uniform, Scheme::DataSize] {
            let got = aggregate(&ups, scheme).unwrap();
            assert_eq!(bits(&got.values), bits(&oracle(&ups, scheme)), "case {} {:?}", seed, scheme);
        }
    }
    cases
}

/// Shuffled upload lists aggregate to the same bits.
pub fn permutation_invariant(cases: usize) -> usize {
    for seed in 0..cases as u64 {
        let mut ups = random_uploads(seed);
        let want = aggregate(&ups, Scheme::DataSize).unwrap();
        let mut r = rng::stream(seed, "agg-perm", 0);
        for _ in 0..3 {
            ups.shuffle(&mut r);
            let got = aggregate(&ups, Scheme::DataSize).unwrap();
            assert_eq!(bits(&got.values), bits(&want.values), "case {}", seed);
        }
    }
    cases
}
