use proptest::prelude::*;
use pwff_core::tasks::{
    dirichlet_partition, gen_dataset, kind_histogram, oracle_harmless, oracle_helpful, total_variation,
    InstructionTask, TaskConfig, TaskKind, VocabPolicy,
};
use pwff_core::PwffError;

fn dataset(seed: u64, n: usize) -> Vec<InstructionTask> {
    let policy = VocabPolicy::standard(20, 3).unwrap();
    gen_dataset(seed, n, &TaskConfig::default(), &policy).unwrap()
}

fn client_histograms(data: &[InstructionTask], shards: &[Vec<usize>]) -> Vec<[f64; 3]> {
    shards.iter().filter(|s| !s.is_empty()).map(|s| kind_histogram(s.iter().map(|&i| &data[i]))).collect()
}

fn mean_tv(data: &[InstructionTask], shards: &[Vec<usize>]) -> f64 {
    let global = kind_histogram(data);
    let h = client_histograms(data, shards);
    h.iter().map(|c| total_variation(c, &global)).sum::<f64>() / h.len() as f64
}

#[test]
fn huge_alpha_is_iid() {
    let data = dataset(1, 3000);
    let global = kind_histogram(&data);
    let shards = dirichlet_partition(&data, 10, 1e6, 7).unwrap();
    for h in client_histograms(&data, &shards) {
        assert!(total_variation(&h, &global) < 0.05, "{:?} vs {:?}", h, global);
    }
}

#[test]
fn small_alpha_concentrates_some_client() {
    let data = dataset(2, 1200);
    for seed in 0..20 {
        let shards = dirichlet_partition(&data, 10, 0.1, seed).unwrap();
        let peak =
            client_histograms(&data, &shards).iter().map(|h| h.iter().cloned().fold(0.0, f64::max)).fold(0.0, f64::max);
        assert!(peak > 0.7, "seed {}: peak share {}", seed, peak);
    }
}

#[test]
fn skew_decreases_with_alpha() {
    let data = dataset(3, 1200);
    let alphas = [0.1, 1.0, 10.0, 100.0];
    let mut means = Vec::new();
    for &a in &alphas {
        let m: f64 =
            (0..30).map(|s| mean_tv(&data, &dirichlet_partition(&data, 10, a, s).unwrap())).sum::<f64>() / 30.0;
        means.push(m);
    }
    assert!(means.windows(2).all(|w| w[0] > w[1]), "{:?}", means);
}

#[test]
fn too_few_samples_or_bad_params_are_config_errors() {
    let data = dataset(4, 5);
    assert!(matches!(dirichlet_partition(&data, 10, 0.5, 0), Err(PwffError::Config(_))));
    assert!(matches!(dirichlet_partition(&data, 1, 0.5, 0), Err(PwffError::Config(_))));
    assert!(matches!(dirichlet_partition(&data, 2, 0.0, 0), Err(PwffError::Config(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn shards_are_a_partition(n in 20usize..300, clients in 2usize..12, alpha in 0.05f64..50.0, seed in any::<u64>()) {
        let data = dataset(seed, n);
        let shards = dirichlet_partition(&data, clients, alpha, seed).unwrap();
        prop_assert_eq!(shards.len(), clients);
        let mut all: Vec<usize> = shards.iter().flatten().copied().collect();
        prop_assert_eq!(all.len(), n);
        all.sort_unstable();
        all.dedup();
        prop_assert_eq!(all.len(), n);
        prop_assert_eq!(dirichlet_partition(&data, clients, alpha, seed).unwrap(), shards);
    }

    #[test]
    fn oracles_stay_in_unit_interval(
        payload in prop::collection::vec(5usize..20, 1..5),
        response in prop::collection::vec(0usize..20, 0..8),
        kind in 0usize..3,
    ) {
        let policy = VocabPolicy::standard(20, 3).unwrap();
        let t = InstructionTask::new([TaskKind::Copy, TaskKind::Reverse, TaskKind::Sort][kind], &payload);
        let h = oracle_helpful(&t, &response);
        let x = oracle_harmless(&response, &policy);
        prop_assert!((0.0..=1.0).contains(&h));
        prop_assert!((0.0..=1.0).contains(&x));
        prop_assert_eq!(oracle_helpful(&t, &t.target), 1.0);
    }
}
