use proptest::prelude::*;
use pwff_core::channel::{
    comm_delay, expected_rayleigh_rate, shannon_rate, tx_energy, upload_cost, upload_rate, ChannelConfig, Fading,
    RateMode,
};

fn rayleigh(snr_db: f64, seed: u64) -> ChannelConfig {
    ChannelConfig { snr_db, fading: Fading::Rayleigh, fading_seed: seed, ..Default::default() }
}

#[test]
fn empirical_rayleigh_rate_matches_expectation() {
    for (snr, seed) in [(5.0, 0), (0.0, 1), (15.0, 2)] {
        let cfg = rayleigh(snr, seed);
        let n = 10_000u64;
        let mean = (0..n).map(|i| upload_rate(&cfg, i / 10, i % 10)).sum::<f64>() / n as f64;
        let want = expected_rayleigh_rate(&cfg);
        assert!((mean / want - 1.0).abs() < 0.02, "snr {}: {} vs {}", snr, mean, want);
        assert!(want < shannon_rate(&cfg));
    }
}

#[test]
fn expected_mode_is_constant() {
    let cfg = ChannelConfig { rate_mode: RateMode::Expected, ..rayleigh(5.0, 3) };
    let r = upload_rate(&cfg, 0, 0);
    assert_eq!(r, expected_rayleigh_rate(&cfg));
    assert!((0..50).all(|i| upload_rate(&cfg, i, i + 1) == r));
}

#[test]
fn reference_settings_rate() {
    let cfg = ChannelConfig::default();
    let want = 1e6 * (1.0 + 10f64.powf(0.5)).log2();
    assert!((shannon_rate(&cfg) / want - 1.0).abs() < 1e-12);
}

proptest! {
    #[test]
    fn cost_is_linear_in_payload(bits in 1u64..1 << 40, k in 1u64..64, snr in -10.0f64..30.0, p in 0.01f64..10.0) {
        let cfg = ChannelConfig { snr_db: snr, tx_power_w: p, ..Default::default() };
        let one = upload_cost(&cfg, bits, 0, 0).unwrap();
        let many = upload_cost(&cfg, bits * k, 0, 0).unwrap();
        prop_assert!((many.delay_s / (k as f64 * one.delay_s) - 1.0).abs() < 1e-12);
        prop_assert!((one.energy_j / (p * one.delay_s) - 1.0).abs() < 1e-12);
        let d = comm_delay(bits, shannon_rate(&cfg)).unwrap();
        prop_assert_eq!(d, one.delay_s);
        prop_assert_eq!(tx_energy(d, &cfg), one.energy_j);
    }
}
