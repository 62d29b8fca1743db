use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::model::{ParamId, ParamSet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    /// Global gradient-norm clip; `0` disables clipping.
    pub clip_norm: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, clip_norm: 1.0 }
    }
}

/// Adam with moments keyed by tensor name, so the state survives parameter
/// reloads and model copies.
#[derive(Clone, Debug, Default)]
pub struct Adam {
    pub cfg: AdamConfig,
    step: i32,
    moments: BTreeMap<String, (Vec<f32>, Vec<f32>)>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self { cfg, step: 0, moments: BTreeMap::new() }
    }

    pub fn steps(&self) -> i32 {
        self.step
    }

    pub fn apply(&mut self, params: &mut ParamSet, grads: &[(ParamId, Vec<f32>)], lr: f32) {
        if lr == 0.0 || grads.is_empty() {
            return;
        }
        let norm = grads.iter().flat_map(|(_, g)| g).map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt() as f32;
        let clip = if self.cfg.clip_norm > 0.0 && norm > self.cfg.clip_norm { self.cfg.clip_norm / norm } else { 1.0 };
        self.step += 1;
        let AdamConfig { beta1, beta2, eps, .. } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.step);
        let c2 = 1.0 - beta2.powi(self.step);
        for (id, g) in grads {
            let name = params.get(*id).name.clone();
            let (m, v) = self.moments.entry(name).or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            let w = params.data_mut(*id);
            for i in 0..g.len() {
                let gi = g[i] * clip;
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                w[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ParamGroup;

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = ParamSet::new();
        let id = p.push("w", ParamGroup::Adapter, vec![2], vec![1.0, -1.0]).unwrap();
        let mut opt = Adam::new(AdamConfig { clip_norm: 0.0, ..Default::default() });
        opt.apply(&mut p, &[(id, vec![0.5, -2.0])], 0.1);
        let w = &p.get(id).data;
        assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] + 0.9).abs() < 1e-6, "{:?}", w);
    }

    #[test]
    fn zero_lr_is_a_no_op() {
        let mut p = ParamSet::new();
        let id = p.push("w", ParamGroup::Adapter, vec![1], vec![1.0]).unwrap();
        let mut opt = Adam::new(AdamConfig::default());
        opt.apply(&mut p, &[(id, vec![3.0])], 0.0);
        assert_eq!(p.get(id).data, vec![1.0]);
        assert_eq!(opt.steps(), 0);
    }
}
