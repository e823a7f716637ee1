//! Named parameter collections and their checkpoint format.
//!
//! A checkpoint is a little-endian binary file:
//!
//! ```text
//! magic "SDCK" | version u32 | set count u32
//! per set:   entry count u32
//! per entry: name len u32 | name utf-8 | group u8 | rank u32 | dims u64* | values f64*
//! ```
//!
//! Values are stored as raw IEEE-754 bits, so a write/read round trip is
//! bit-exact.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"SDCK";
const VERSION: u32 = 1;

/// Learning-rate group of a parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Encoder,
    Head,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub tensor: Tensor,
    pub group: Group,
}

impl Param {
    /// Decoupled weight decay applies to matrices only, never to biases or
    /// layer-norm vectors.
    pub fn decays(&self) -> bool {
        self.tensor.shape().len() >= 2
    }
}

/// The full set of model parameters, ordered by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterSet {
    entries: BTreeMap<String, Param>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor, group: Group) {
        self.entries.insert(name.into(), Param { tensor, group });
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.entries.get(name)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .map(|p| &p.tensor)
            .ok_or_else(|| Error::Contract(format!("no parameter named `{name}`")))
    }

    pub fn tensor_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(name)
            .map(|p| &mut p.tensor)
            .ok_or_else(|| Error::Contract(format!("no parameter named `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar values.
    pub fn num_values(&self) -> usize {
        self.entries.values().map(|p| p.tensor.len()).sum()
    }

    /// Same names, shapes and groups as `other`.
    pub fn check_compatible(&self, other: &ParameterSet) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(Error::Shape(format!(
                "parameter sets hold {} and {} tensors",
                self.entries.len(),
                other.entries.len()
            )));
        }
        for ((na, pa), (nb, pb)) in self.entries.iter().zip(&other.entries) {
            if na != nb {
                return Err(Error::Shape(format!(
                    "parameter names differ: `{na}` vs `{nb}`"
                )));
            }
            if pa.tensor.shape() != pb.tensor.shape() || pa.group != pb.group {
                return Err(Error::Shape(format!(
                    "parameter `{na}`: {:?} vs {:?}",
                    pa.tensor.shape(),
                    pb.tensor.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn zeros_like(&self) -> ParameterSet {
        ParameterSet {
            entries: self
                .entries
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            tensor: Tensor::zeros(p.tensor.shape()),
                            group: p.group,
                        },
                    )
                })
                .collect(),
        }
    }

    pub fn scale(&mut self, c: f64) {
        for p in self.entries.values_mut() {
            for v in p.tensor.data_mut() {
                *v *= c;
            }
        }
    }

    pub fn scaled(&self, c: f64) -> ParameterSet {
        let mut out = self.clone();
        out.scale(c);
        out
    }

    /// `self += c * other`. Callers must have checked compatibility.
    pub fn axpy(&mut self, c: f64, other: &ParameterSet) {
        for (p, q) in self.entries.values_mut().zip(other.entries.values()) {
            p.tensor.axpy(c, &q.tensor);
        }
    }

    /// Largest absolute elementwise difference.
    pub fn max_abs_diff(&self, other: &ParameterSet) -> f64 {
        self.entries
            .values()
            .zip(other.entries.values())
            .map(|(a, b)| a.tensor.max_abs_diff(&b.tensor))
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.entries.values().all(|p| p.tensor.is_finite())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_sets(path, std::slice::from_ref(self))
    }

    pub fn load(path: &Path) -> Result<ParameterSet> {
        let mut sets = load_sets(path)?;
        if sets.len() != 1 {
            return Err(Error::Input(format!(
                "{} holds {} parameter sets, expected 1",
                path.display(),
                sets.len()
            )));
        }
        Ok(sets.remove(0))
    }
}

pub fn encode_sets(sets: &[ParameterSet]) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(sets.len() as u32).to_le_bytes());
    for set in sets {
        buf.extend_from_slice(&(set.len() as u32).to_le_bytes());
        for (name, p) in set.iter() {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.push(match p.group {
                Group::Encoder => 0,
                Group::Head => 1,
            });
            let shape = p.tensor.shape();
            buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &d in shape {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in p.tensor.data() {
                buf.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        }
    }
    buf
}

pub fn decode_sets(mut bytes: &[u8]) -> Result<Vec<ParameterSet>> {
    fn take<const N: usize>(r: &mut &[u8]) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        r.read_exact(&mut b)
            .map_err(|_| Error::Input("checkpoint is truncated".into()))?;
        Ok(b)
    }
    let r = &mut bytes;
    if &take::<4>(r)? != MAGIC {
        return Err(Error::Input("not a parameter checkpoint".into()));
    }
    let version = u32::from_le_bytes(take(r)?);
    if version != VERSION {
        return Err(Error::Input(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let n_sets = u32::from_le_bytes(take(r)?);
    let mut sets = Vec::with_capacity(n_sets as usize);
    for _ in 0..n_sets {
        let n = u32::from_le_bytes(take(r)?);
        let mut set = ParameterSet::new();
        for _ in 0..n {
            let len = u32::from_le_bytes(take(r)?) as usize;
            if r.len() < len {
                return Err(Error::Input("checkpoint is truncated".into()));
            }
            let (name, rest) = r.split_at(len);
            let name = std::str::from_utf8(name)
                .map_err(|_| Error::Input("parameter name is not utf-8".into()))?
                .to_string();
            *r = rest;
            let group = match take::<1>(r)?[0] {
                0 => Group::Encoder,
                1 => Group::Head,
                g => return Err(Error::Input(format!("unknown parameter group {g}"))),
            };
            let rank = u32::from_le_bytes(take(r)?) as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u64::from_le_bytes(take(r)?) as usize);
            }
            let count: usize = shape.iter().product();
            if r.len() < count * 8 {
                return Err(Error::Input("checkpoint is truncated".into()));
            }
            let mut data = Vec::with_capacity(count);
            for _ in 0..count {
                data.push(f64::from_bits(u64::from_le_bytes(take(r)?)));
            }
            set.insert(name, Tensor::new(shape, data)?, group);
        }
        sets.push(set);
    }
    if !r.is_empty() {
        return Err(Error::Input("trailing bytes after checkpoint".into()));
    }
    Ok(sets)
}

pub fn save_sets(path: &Path, sets: &[ParameterSet]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode_sets(sets))
        .map_err(|e| Error::io(path, e))
}

pub fn load_sets(path: &Path) -> Result<Vec<ParameterSet>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_sets(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample(values: Vec<f64>) -> ParameterSet {
        let mut p = ParameterSet::new();
        let n = values.len();
        p.insert("a.weight", Tensor::new(vec![1, n], values.clone()).unwrap(), Group::Encoder);
        p.insert("b.bias", Tensor::vector(values), Group::Head);
        p
    }

    proptest! {
        #[test]
        fn checkpoint_round_trip_is_bit_exact(values in prop::collection::vec(prop::num::f64::ANY, 1..20)) {
            let set = sample(values);
            let back = decode_sets(&encode_sets(std::slice::from_ref(&set))).unwrap();
            prop_assert_eq!(back.len(), 1);
            for ((_, a), (_, b)) in set.iter().zip(back[0].iter()) {
                let bits_a: Vec<u64> = a.tensor.data().iter().map(|v| v.to_bits()).collect();
                let bits_b: Vec<u64> = b.tensor.data().iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(bits_a, bits_b);
                prop_assert_eq!(a.group, b.group);
            }
        }
    }

    #[test]
    fn truncated_checkpoint_is_rejected() {
        let bytes = encode_sets(&[sample(vec![1.0, 2.0])]);
        assert!(decode_sets(&bytes[..bytes.len() - 3]).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.ckpt");
        let set = sample(vec![0.1, -0.2, 3.5]);
        set.save(&path).unwrap();
        assert_eq!(ParameterSet::load(&path).unwrap(), set);
    }

    #[test]
    fn compatibility_checks_shapes() {
        let a = sample(vec![1.0, 2.0]);
        let b = sample(vec![1.0, 2.0, 3.0]);
        assert!(a.check_compatible(&a.clone()).is_ok());
        assert!(a.check_compatible(&b).is_err());
    }

    #[test]
    fn decay_only_on_matrices() {
        let s = sample(vec![1.0]);
        assert!(s.get("a.weight").unwrap().decays());
        assert!(!s.get("b.bias").unwrap().decays());
    }
}
