use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{PwffError, Result};

/// Parameter groups; the unit of federated exchange.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Base,
    Adapter,
    Lora,
    RewardHead,
    CriticHead,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 5] =
        [ParamGroup::Base, ParamGroup::Adapter, ParamGroup::Lora, ParamGroup::RewardHead, ParamGroup::CriticHead];

    pub fn as_str(self) -> &'static str {
        match self {
            ParamGroup::Base => "base",
            ParamGroup::Adapter => "adapter",
            ParamGroup::Lora => "lora",
            ParamGroup::RewardHead => "reward_head",
            ParamGroup::CriticHead => "critic_head",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|g| g.as_str() == s)
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Index of a tensor inside a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub group: ParamGroup,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl ParamEntry {
    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

/// Named tensor description, in exchange order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub group: ParamGroup,
    pub shape: Vec<usize>,
}

impl ManifestEntry {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn param_count(&self) -> usize {
        self.entries.iter().map(ManifestEntry::numel).sum()
    }

    /// Payload size at 32 bits per parameter.
    pub fn bits(&self) -> u64 {
        32 * self.param_count() as u64
    }

    pub fn groups(&self) -> Vec<ParamGroup> {
        let mut g: Vec<ParamGroup> = self.entries.iter().map(|e| e.group).collect();
        g.sort();
        g.dedup();
        g
    }
}

/// Flat parameter vector plus the manifest describing how to unflatten it.
#[derive(Clone, Debug, PartialEq)]
pub struct FlatParams {
    pub manifest: Manifest,
    pub values: Vec<f32>,
}

impl FlatParams {
    pub fn bits(&self) -> u64 {
        self.manifest.bits()
    }
}

/// Owned parameter storage for one model. Entries keep insertion order, which
/// is also the flattening order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: Vec<ParamEntry>,
    by_name: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(
        &mut self,
        name: impl Into<String>,
        group: ParamGroup,
        shape: Vec<usize>,
        data: Vec<f32>,
    ) -> Result<ParamId> {
        let name = name.into();
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(PwffError::dim("param", format!("{}: shape {:?} vs {} values", name, shape, data.len())));
        }
        if self.by_name.contains_key(&name) {
            return Err(PwffError::Contract(format!("duplicate parameter name {}", name)));
        }
        self.by_name.insert(name.clone(), self.entries.len());
        self.entries.push(ParamEntry { name, group, shape, data });
        Ok(ParamId(self.entries.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    /// Move every tensor into `group`.
    pub fn regroup(&mut self, group: ParamGroup) {
        for e in &mut self.entries {
            e.group = group;
        }
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn get(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn data_mut(&mut self, id: ParamId) -> &mut [f32] {
        &mut self.entries[id.0].data
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn ids_in(&self, groups: &[ParamGroup]) -> Vec<ParamId> {
        (0..self.entries.len()).filter(|&i| groups.contains(&self.entries[i].group)).map(ParamId).collect()
    }

    pub fn count(&self, group: ParamGroup) -> usize {
        self.entries.iter().filter(|e| e.group == group).map(ParamEntry::numel).sum()
    }

    pub fn total_count(&self) -> usize {
        self.entries.iter().map(ParamEntry::numel).sum()
    }

    pub fn has_group(&self, group: ParamGroup) -> bool {
        self.entries.iter().any(|e| e.group == group)
    }

    pub fn manifest(&self, groups: &[ParamGroup]) -> Manifest {
        Manifest {
            entries: self
                .entries
                .iter()
                .filter(|e| groups.contains(&e.group))
                .map(|e| ManifestEntry { name: e.name.clone(), group: e.group, shape: e.shape.clone() })
                .collect(),
        }
    }

    /// Concatenate the tensors of `groups` in insertion order.
    pub fn flatten(&self, groups: &[ParamGroup]) -> FlatParams {
        let manifest = self.manifest(groups);
        let mut values = Vec::with_capacity(manifest.param_count());
        for e in self.entries.iter().filter(|e| groups.contains(&e.group)) {
            values.extend_from_slice(&e.data);
        }
        FlatParams { manifest, values }
    }

    /// Overwrite the tensors named in `flat.manifest`. Every entry must exist
    /// with the same group and shape.
    pub fn load_flat(&mut self, flat: &FlatParams) -> Result<()> {
        if flat.values.len() != flat.manifest.param_count() {
            return Err(PwffError::Protocol(format!(
                "flat vector has {} values, manifest predicts {}",
                flat.values.len(),
                flat.manifest.param_count()
            )));
        }
        let mut slots = Vec::with_capacity(flat.manifest.entries.len());
        for m in &flat.manifest.entries {
            let idx =
                *self.by_name.get(&m.name).ok_or_else(|| PwffError::Protocol(format!("unknown tensor {}", m.name)))?;
            let e = &self.entries[idx];
            if e.group != m.group || e.shape != m.shape {
                return Err(PwffError::Protocol(format!(
                    "tensor {} is {} {:?} locally but {} {:?} in the manifest",
                    m.name, e.group, e.shape, m.group, m.shape
                )));
            }
            slots.push(idx);
        }
        let mut off = 0;
        for idx in slots {
            let n = self.entries[idx].data.len();
            self.entries[idx].data.copy_from_slice(&flat.values[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Split into one flat vector per group present.
    pub fn partition(&self) -> ParamPartition {
        let mut groups = BTreeMap::new();
        for g in ParamGroup::ALL {
            if self.has_group(g) {
                groups.insert(g, self.flatten(&[g]));
            }
        }
        ParamPartition { groups }
    }

    /// Rebuild a parameter set from a partition. Tensor order follows group
    /// order, then manifest order.
    pub fn from_partition(partition: &ParamPartition) -> Result<Self> {
        let mut set = ParamSet::new();
        for flat in partition.groups.values() {
            let mut off = 0;
            for m in &flat.manifest.entries {
                let n = m.numel();
                let data = flat
                    .values
                    .get(off..off + n)
                    .ok_or_else(|| PwffError::Protocol("partition vector too short".into()))?
                    .to_vec();
                set.push(m.name.clone(), m.group, m.shape.clone(), data)?;
                off += n;
            }
        }
        Ok(set)
    }

    /// FNV-1a over the raw bits of every tensor in `groups`; equal hashes are
    /// used as a bitwise-equality witness in tests and reports.
    pub fn hash(&self, groups: &[ParamGroup]) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for e in self.entries.iter().filter(|e| groups.contains(&e.group)) {
            for b in e.name.bytes() {
                h = (h ^ b as u64).wrapping_mul(0x0100_0000_01b3);
            }
            for v in &e.data {
                for b in v.to_bits().to_le_bytes() {
                    h = (h ^ b as u64).wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }
}

/// Disjoint per-group flat vectors of one model.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamPartition {
    pub groups: BTreeMap<ParamGroup, FlatParams>,
}

impl ParamPartition {
    pub fn count(&self, group: ParamGroup) -> usize {
        self.groups.get(&group).map_or(0, |f| f.manifest.param_count())
    }

    pub fn byte_size(&self, group: ParamGroup) -> usize {
        4 * self.count(group)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamSet {
        let mut p = ParamSet::new();
        p.push("w", ParamGroup::Base, vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        p.push("a.down", ParamGroup::Adapter, vec![3], vec![0.5, -0.5, 0.25]).unwrap();
        p.push("l.a", ParamGroup::Lora, vec![1, 2], vec![7.0, 8.0]).unwrap();
        p
    }

    #[test]
    fn flatten_then_load_is_identity() {
        let mut p = sample();
        let flat = p.flatten(&[ParamGroup::Adapter, ParamGroup::Lora]);
        assert_eq!(flat.values, vec![0.5, -0.5, 0.25, 7.0, 8.0]);
        assert_eq!(flat.bits(), 5 * 32);
        let before = p.clone();
        p.load_flat(&flat).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn load_rejects_foreign_manifest() {
        let mut p = sample();
        let mut flat = p.flatten(&[ParamGroup::Adapter]);
        flat.manifest.entries[0].shape = vec![1, 3];
        assert!(matches!(p.load_flat(&flat), Err(PwffError::Protocol(_))));
    }

    #[test]
    fn partition_round_trip() {
        let p = sample();
        let part = p.partition();
        assert_eq!(part.count(ParamGroup::Base), 4);
        assert_eq!(part.byte_size(ParamGroup::Lora), 8);
        assert_eq!(part.count(ParamGroup::CriticHead), 0);
        let q = ParamSet::from_partition(&part).unwrap();
        assert_eq!(q.hash(&ParamGroup::ALL), p.hash(&ParamGroup::ALL));
    }

    #[test]
    fn hash_sees_single_bit_changes() {
        let mut p = sample();
        let h = p.hash(&[ParamGroup::Base]);
        p.data_mut(ParamId(0))[0] = f32::from_bits(1.0f32.to_bits() + 1);
        assert_ne!(h, p.hash(&[ParamGroup::Base]));
        assert_eq!(p.hash(&[ParamGroup::Lora]), sample().hash(&[ParamGroup::Lora]));
    }
}
