use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Stable handle into a [`ParameterSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub group: String,
    pub value: Tensor,
    pub grad: Tensor,
}

/// Named, group-tagged learned tensors with gradient slots, in insertion
/// order.
#[derive(Clone, Debug, Default)]
pub struct ParameterSet {
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    entries: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    group: String,
}

const MANIFEST_FORMAT: &str = "pkpd-params";

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, group: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter name `{name}`")));
        }
        let grad = Tensor::zeros(value.shape());
        let id = self.entries.len();
        self.index.insert(name.clone(), id);
        self.entries.push(ParamEntry {
            name,
            group: group.into(),
            value,
            grad,
        });
        Ok(ParamId(id))
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index
            .get(name)
            .map(|&i| ParamId(i))
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].grad
    }

    pub fn group(&self, id: ParamId) -> &str {
        &self.entries[id.0].group
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Number of scalars in entries whose group satisfies `pred`.
    pub fn num_scalars_where(&self, pred: impl Fn(&str) -> bool) -> usize {
        self.entries
            .iter()
            .filter(|e| pred(&e.group))
            .map(|e| e.value.len())
            .sum()
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, g: &Tensor) {
        self.entries[id.0].grad.add_assign(g);
    }

    /// Euclidean norm of all gradients taken together.
    pub fn grad_norm(&self) -> f64 {
        self.entries
            .iter()
            .flat_map(|e| e.grad.data())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale_grads(&mut self, c: f64) {
        for e in &mut self.entries {
            e.grad.data_mut().iter_mut().for_each(|v| *v *= c);
        }
    }

    pub fn zero_grad(&mut self) {
        for e in &mut self.entries {
            e.grad.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Replaces every value with the matching entry of `other`, which must
    /// have the same names and shapes in the same order.
    pub fn copy_values_from(&mut self, other: &ParameterSet) -> Result<()> {
        if other.entries.len() != self.entries.len() {
            return Err(Error::invalid(format!(
                "parameter count mismatch: {} vs {}",
                self.entries.len(),
                other.entries.len()
            )));
        }
        for (a, b) in self.entries.iter_mut().zip(&other.entries) {
            if a.name != b.name || a.value.shape() != b.value.shape() {
                return Err(Error::invalid(format!(
                    "parameter `{}` {:?} does not match `{}` {:?}",
                    a.name,
                    a.value.shape(),
                    b.name,
                    b.value.shape()
                )));
            }
            a.value = b.value.clone();
        }
        Ok(())
    }

    /// JSON manifest (names, shapes, groups) and a little-endian f64 blob.
    pub fn to_bytes(&self) -> (String, Vec<u8>) {
        let manifest = Manifest {
            format: MANIFEST_FORMAT.to_string(),
            version: 1,
            entries: self
                .entries
                .iter()
                .map(|e| ManifestEntry {
                    name: e.name.clone(),
                    shape: e.value.shape().to_vec(),
                    group: e.group.clone(),
                })
                .collect(),
        };
        let mut blob = Vec::with_capacity(self.num_scalars() * 8);
        for e in &self.entries {
            for v in e.value.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        (serde_json::to_string_pretty(&manifest).expect("manifest serializes"), blob)
    }

    pub fn from_bytes(manifest: &str, blob: &[u8]) -> Result<Self> {
        let manifest: Manifest = serde_json::from_str(manifest)?;
        if manifest.format != MANIFEST_FORMAT {
            return Err(Error::invalid(format!("unexpected manifest format `{}`", manifest.format)));
        }
        let total: usize = manifest
            .entries
            .iter()
            .map(|e| e.shape.iter().product::<usize>())
            .sum();
        if blob.len() != total * 8 {
            return Err(Error::invalid(format!(
                "blob holds {} bytes, manifest needs {}",
                blob.len(),
                total * 8
            )));
        }
        let mut values = blob
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        let mut set = ParameterSet::new();
        for e in manifest.entries {
            let n = e.shape.iter().product();
            let data: Vec<f64> = values.by_ref().take(n).collect();
            set.insert(e.name, e.group, Tensor::new(e.shape, data)?)?;
        }
        Ok(set)
    }

    pub fn save(&self, manifest_path: &Path, blob_path: &Path) -> Result<()> {
        let (manifest, blob) = self.to_bytes();
        fs::write(manifest_path, manifest)?;
        fs::write(blob_path, blob)?;
        Ok(())
    }

    pub fn load(manifest_path: &Path, blob_path: &Path) -> Result<Self> {
        let manifest = fs::read_to_string(manifest_path)?;
        let blob = fs::read(blob_path)?;
        Self::from_bytes(&manifest, &blob)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut ps = ParameterSet::new();
        ps.insert("w", "transition", Tensor::zeros(&[2])).unwrap();
        assert!(ps.insert("w", "attention", Tensor::zeros(&[2])).is_err());
        assert!(matches!(ps.id("missing"), Err(Error::UnknownParameter(_))));
    }

    proptest! {
        #[test]
        fn serialization_round_trip_is_bit_exact(
            a in proptest::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 6),
            b in proptest::collection::vec(-1e300f64..1e300, 4),
        ) {
            let mut ps = ParameterSet::new();
            ps.insert("layer.w", "transition", Tensor::new(vec![2, 3], a).unwrap()).unwrap();
            ps.insert("attn.q", "attention", Tensor::new(vec![4], b).unwrap()).unwrap();
            let (m, blob) = ps.to_bytes();
            let back = ParameterSet::from_bytes(&m, &blob).unwrap();
            prop_assert_eq!(back.len(), 2);
            for (x, y) in ps.entries().iter().zip(back.entries()) {
                prop_assert_eq!(&x.name, &y.name);
                prop_assert_eq!(&x.group, &y.group);
                prop_assert_eq!(x.value.shape(), y.value.shape());
                for (p, q) in x.value.data().iter().zip(y.value.data()) {
                    prop_assert_eq!(p.to_bits(), q.to_bits());
                }
            }
        }
    }

    #[test]
    fn truncated_blob_is_an_error() {
        let mut ps = ParameterSet::new();
        ps.insert("w", "g", Tensor::zeros(&[3])).unwrap();
        let (m, blob) = ps.to_bytes();
        assert!(ParameterSet::from_bytes(&m, &blob[..16]).is_err());
    }
}
