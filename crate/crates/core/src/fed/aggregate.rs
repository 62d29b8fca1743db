use serde::{Deserialize, Serialize};

use super::strategy::Strategy;
use crate::error::{PwffError, Result};
use crate::model::{FlatParams, ParamSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Uniform,
    DataSize,
}

/// One client's contribution to an aggregation round.
#[derive(Clone, Debug, PartialEq)]
pub struct Upload {
    pub client: usize,
    pub flat: FlatParams,
    pub data_size: usize,
}

/// Flatten the strategy's upload groups. Asking for a group the model does
/// not have is a configuration error.
pub fn select_upload(params: &ParamSet, strategy: &Strategy) -> Result<FlatParams> {
    if let Some(g) = strategy.upload_groups.iter().find(|g| !params.has_group(**g)) {
        return Err(PwffError::Config(format!(
            "{} uploads the {} group, which this model does not have",
            strategy.name, g
        )));
    }
    Ok(params.flatten(&strategy.upload_groups))
}

/// Weighted elementwise mean. Uploads are visited in ascending client id and
/// accumulated in `f64`, so the result does not depend on the order of
/// `uploads`.
pub fn aggregate(uploads: &[Upload], scheme: Scheme) -> Result<FlatParams> {
    let first = uploads.first().ok_or_else(|| PwffError::Protocol("nothing to aggregate".into()))?;
    let mut order: Vec<&Upload> = uploads.iter().collect();
    order.sort_by_key(|u| u.client);
    if order.windows(2).any(|w| w[0].client == w[1].client) {
        return Err(PwffError::Protocol("duplicate client id among uploads".into()));
    }
    for u in &order {
        if u.flat.manifest != first.flat.manifest || u.flat.values.len() != first.flat.values.len() {
            return Err(PwffError::Protocol(format!("upload from client {} has a different manifest", u.client)));
        }
    }
    let weights: Vec<f64> = order
        .iter()
        .map(|u| match scheme {
            Scheme::Uniform => 1.0,
            Scheme::DataSize => u.data_size as f64,
        })
        .collect();
    if weights.iter().any(|&w| w <= 0.0) {
        return Err(PwffError::Protocol("aggregation weights must be positive".into()));
    }
    let total: f64 = weights.iter().sum();
    let mut acc = vec![0f64; first.flat.values.len()];
    for (u, w) in order.iter().zip(&weights) {
        let w = w / total;
        for (a, &x) in acc.iter_mut().zip(&u.flat.values) {
            *a += w * x as f64;
        }
    }
    Ok(FlatParams { manifest: first.flat.manifest.clone(), values: acc.into_iter().map(|a| a as f32).collect() })
}

/// Overwrite the aggregated tensors of every target. All manifests are checked
/// before anything is written.
pub fn broadcast<'a>(global: &FlatParams, targets: impl IntoIterator<Item = &'a mut ParamSet>) -> Result<()> {
    let targets: Vec<&mut ParamSet> = targets.into_iter().collect();
    let groups = global.manifest.groups();
    for t in &targets {
        if t.manifest(&groups) != global.manifest {
            return Err(PwffError::Protocol("broadcast manifest does not match a client model".into()));
        }
    }
    for t in targets {
        t.load_flat(global)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Manifest, ManifestEntry, ParamGroup};

    fn flat(values: Vec<f32>) -> FlatParams {
        let manifest = Manifest {
            entries: vec![ManifestEntry { name: "a".into(), group: ParamGroup::Adapter, shape: vec![values.len()] }],
        };
        FlatParams { manifest, values }
    }

    fn up(client: usize, values: Vec<f32>, data_size: usize) -> Upload {
        Upload { client, flat: flat(values), data_size }
    }

    #[test]
    fn reference_means() {
        let g = aggregate(&[up(0, vec![1.0], 5), up(1, vec![3.0], 7)], Scheme::Uniform).unwrap();
        assert_eq!(g.values, vec![2.0]);
        let g = aggregate(&[up(0, vec![0.0], 10), up(1, vec![4.0], 30)], Scheme::DataSize).unwrap();
        assert_eq!(g.values, vec![3.0]);
        let same = vec![0.1, -7.25, 3.3];
        let g = aggregate(&[up(2, same.clone(), 1), up(0, same.clone(), 9), up(1, same.clone(), 4)], Scheme::DataSize)
            .unwrap();
        assert_eq!(g.values, same);
    }

    #[test]
    fn protocol_errors() {
        assert!(matches!(aggregate(&[], Scheme::Uniform), Err(PwffError::Protocol(_))));
        let r = aggregate(&[up(0, vec![1.0], 1), up(1, vec![1.0, 2.0], 1)], Scheme::Uniform);
        assert!(matches!(r, Err(PwffError::Protocol(_))));
        let r = aggregate(&[up(0, vec![1.0], 0), up(1, vec![1.0], 1)], Scheme::DataSize);
        assert!(matches!(r, Err(PwffError::Protocol(_))));
        let r = aggregate(&[up(1, vec![1.0], 1), up(1, vec![1.0], 1)], Scheme::Uniform);
        assert!(matches!(r, Err(PwffError::Protocol(_))));
    }

    #[test]
    fn broadcast_checks_every_target_first() {
        let mut a = ParamSet::new();
        a.push("a", ParamGroup::Adapter, vec![2], vec![0.0, 0.0]).unwrap();
        let mut b = ParamSet::new();
        b.push("a", ParamGroup::Adapter, vec![3], vec![0.0; 3]).unwrap();
        let g = flat(vec![1.0, 2.0]);
        assert!(broadcast(&g, [&mut a, &mut b]).is_err());
        assert_eq!(a.get(a.id("a").unwrap()).data, vec![0.0, 0.0]);
        broadcast(&g, [&mut a]).unwrap();
        assert_eq!(a.get(a.id("a").unwrap()).data, vec![1.0, 2.0]);
    }
}
