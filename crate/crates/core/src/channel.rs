//! Wireless uplink cost model: Shannon rate, delay and transmit energy.

use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::error::{PwffError, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fading {
    None,
    Rayleigh,
}

/// How a Rayleigh channel turns into a per-upload rate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RateMode {
    /// A fresh gain per client and round.
    Realized,
    /// The ergodic rate `E[B log2(1 + g SNR)]`.
    Expected,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChannelConfig {
    pub snr_db: f64,
    pub bandwidth_hz: f64,
    pub tx_power_w: f64,
    pub fading: Fading,
    pub rate_mode: RateMode,
    pub fading_seed: u64,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        Self {
            snr_db: 5.0,
            bandwidth_hz: 1e6,
            tx_power_w: 1.0,
            fading: Fading::None,
            rate_mode: RateMode::Realized,
            fading_seed: 0,
        }
    }
}

impl ChannelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.bandwidth_hz > 0.0 && self.bandwidth_hz.is_finite()) {
            return Err(PwffError::Config(format!("bandwidth_hz must be positive, got {}", self.bandwidth_hz)));
        }
        if !(self.tx_power_w > 0.0 && self.tx_power_w.is_finite()) {
            return Err(PwffError::Config(format!("tx_power_w must be positive, got {}", self.tx_power_w)));
        }
        if !self.snr_db.is_finite() {
            return Err(PwffError::Config("snr_db must be finite".into()));
        }
        Ok(())
    }

    pub fn snr_linear(&self) -> f64 {
        10f64.powf(self.snr_db / 10.0)
    }
}

/// `B log2(1 + g SNR)` for a given power gain `g`.
pub fn rate_with_gain(cfg: &ChannelConfig, gain: f64) -> f64 {
    cfg.bandwidth_hz * (gain * cfg.snr_linear()).ln_1p() / std::f64::consts::LN_2
}

/// Rate without fading.
pub fn shannon_rate(cfg: &ChannelConfig) -> f64 {
    rate_with_gain(cfg, 1.0)
}

/// Ergodic Rayleigh rate, integrating `B log2(1 + g SNR) e^{-g}` over
/// `g in [0, 60]` with composite Simpson's rule. The truncated tail is below
/// `1e-20` of the total.
pub fn expected_rayleigh_rate(cfg: &ChannelConfig) -> f64 {
    let n = 60_000;
    let (a, b) = (0.0, 60.0);
    let h = (b - a) / n as f64;
    let f = |g: f64| rate_with_gain(cfg, g) * (-g).exp();
    let mut s = f(a) + f(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * f(a + i as f64 * h);
    }
    s * h / 3.0
}

pub fn comm_delay(payload_bits: u64, rate: f64) -> Result<f64> {
    if !(rate > 0.0) || !rate.is_finite() {
        return Err(PwffError::Channel(format!("transmission rate must be positive, got {}", rate)));
    }
    Ok(payload_bits as f64 / rate)
}

pub fn tx_energy(delay_s: f64, cfg: &ChannelConfig) -> f64 {
    cfg.tx_power_w * delay_s
}

/// Unit-mean exponential power gain for one (round, client) upload. Draws
/// are keyed rather than sequential, so the schedule does not change them.
pub fn fading_gain(seed: u64, round: u64, client: u64) -> f64 {
    let mut r = rng::stream(seed, "fading", (round << 32) ^ client);
    Exp1.sample(&mut r)
}

/// Rate seen by `client` in `round` under the configured fading mode.
pub fn upload_rate(cfg: &ChannelConfig, round: u64, client: u64) -> f64 {
    match (cfg.fading, cfg.rate_mode) {
        (Fading::None, _) => shannon_rate(cfg),
        (Fading::Rayleigh, RateMode::Expected) => expected_rayleigh_rate(cfg),
        (Fading::Rayleigh, RateMode::Realized) => rate_with_gain(cfg, fading_gain(cfg.fading_seed, round, client)),
    }
}

/// Delay and energy of one upload.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LinkCost {
    pub delay_s: f64,
    pub energy_j: f64,
}

pub fn upload_cost(cfg: &ChannelConfig, bits: u64, round: u64, client: u64) -> Result<LinkCost> {
    let delay_s = comm_delay(bits, upload_rate(cfg, round, client))?;
    Ok(LinkCost { delay_s, energy_j: tx_energy(delay_s, cfg) })
}
