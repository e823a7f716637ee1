//! Parameter averaging, voted prediction, and the snapshot buffers the
//! self-ensemble teachers are built from.

use std::collections::VecDeque;
use std::path::Path;

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::model::TextClassifier;
use crate::params::{load_sets, save_sets, Group, ParameterSet};
use crate::tensor::Tensor;

/// Elementwise mean of compatible parameter sets.
pub fn average_parameters(sets: &[ParameterSet]) -> Result<ParameterSet> {
    average_iter(sets.iter())
}

fn average_iter<'a>(mut sets: impl ExactSizeIterator<Item = &'a ParameterSet>) -> Result<ParameterSet> {
    let n = sets.len();
    let first = sets
        .next()
        .ok_or_else(|| Error::Contract("cannot average zero parameter sets".into()))?;
    let mut sum = first.clone();
    for s in sets {
        sum.check_compatible(s)?;
        sum.axpy(1.0, s);
    }
    if n > 1 {
        let nf = n as f64;
        for (_, p) in sum.iter_mut() {
            for v in p.tensor.data_mut() {
                *v /= nf;
            }
        }
    }
    Ok(sum)
}

/// Mean of the members' class probabilities, `[B, n_classes]`.
pub fn voted_predict(
    model: &TextClassifier,
    members: &[ParameterSet],
    batch: &Batch,
) -> Result<Tensor> {
    let (first, rest) = members
        .split_first()
        .ok_or_else(|| Error::Contract("voting needs at least one member".into()))?;
    let mut sum = model.predict_proba(first, batch)?;
    for m in rest {
        sum.add_assign(&model.predict_proba(m, batch)?);
    }
    Ok(sum.scale(1.0 / members.len() as f64))
}

/// The most recent `capacity` parameter snapshots, oldest first.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointRing {
    capacity: usize,
    buffer: VecDeque<ParameterSet>,
    pushes: u64,
}

impl CheckpointRing {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("snapshot window must hold at least one entry".into()));
        }
        Ok(CheckpointRing {
            capacity,
            buffer: VecDeque::with_capacity(capacity),
            pushes: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.buffer.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buffer.is_empty()
    }

    /// Total snapshots ever pushed.
    pub fn pushes(&self) -> u64 {
        self.pushes
    }

    pub fn iter(&self) -> impl ExactSizeIterator<Item = &ParameterSet> {
        self.buffer.iter()
    }

    pub fn newest(&self) -> Option<&ParameterSet> {
        self.buffer.back()
    }

    /// Appends a snapshot, evicting the oldest once full.
    pub fn push(&mut self, snapshot: ParameterSet) -> Result<()> {
        if let Some(first) = self.buffer.front() {
            first.check_compatible(&snapshot)?;
        }
        if self.buffer.len() == self.capacity {
            self.buffer.pop_front();
        }
        self.buffer.push_back(snapshot);
        self.pushes += 1;
        Ok(())
    }

    /// Mean of everything currently held.
    pub fn window_mean(&self) -> Result<ParameterSet> {
        average_iter(self.buffer.iter())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut sets = vec![meta(&[self.capacity as f64, self.pushes as f64])];
        sets.extend(self.buffer.iter().cloned());
        save_sets(path, &sets)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut sets = load_sets(path)?.into_iter();
        let m = read_meta(sets.next(), path, 2)?;
        let mut ring = CheckpointRing::new(m[0] as usize)?;
        for s in sets {
            ring.push(s)?;
        }
        if ring.len() > ring.capacity {
            return Err(Error::Input(format!("{} overfills its window", path.display())));
        }
        ring.pushes = m[1] as u64;
        Ok(ring)
    }
}

/// Incremental mean over every snapshot seen.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunningMean {
    mean: Option<ParameterSet>,
    count: u64,
}

impl RunningMean {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn mean(&self) -> Option<&ParameterSet> {
        self.mean.as_ref()
    }

    /// `mean += (snapshot - mean) / (count + 1)`.
    pub fn update(&mut self, snapshot: &ParameterSet) -> Result<()> {
        match &mut self.mean {
            None => self.mean = Some(snapshot.clone()),
            Some(mean) => {
                mean.check_compatible(snapshot)?;
                let w = 1.0 / (self.count + 1) as f64;
                for ((_, m), (_, s)) in mean.iter_mut().zip(snapshot.iter()) {
                    for (mv, sv) in m.tensor.data_mut().iter_mut().zip(s.tensor.data()) {
                        *mv += (sv - *mv) * w;
                    }
                }
            }
        }
        self.count += 1;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut sets = vec![meta(&[self.count as f64])];
        sets.extend(self.mean.iter().cloned());
        save_sets(path, &sets)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut sets = load_sets(path)?.into_iter();
        let m = read_meta(sets.next(), path, 1)?;
        let mean = sets.next();
        let count = m[0] as u64;
        if sets.next().is_some() || (count == 0) != mean.is_none() {
            return Err(Error::Input(format!(
                "{} is not a running-mean checkpoint",
                path.display()
            )));
        }
        Ok(RunningMean { mean, count })
    }
}

const META: &str = "__meta__";

fn meta(values: &[f64]) -> ParameterSet {
    let mut s = ParameterSet::new();
    s.insert(META, Tensor::vector(values.to_vec()), Group::Head);
    s
}

fn read_meta(set: Option<ParameterSet>, path: &Path, n: usize) -> Result<Vec<f64>> {
    set.as_ref()
        .and_then(|s| s.tensor(META).ok())
        .filter(|t| t.len() == n)
        .map(|t| t.data().to_vec())
        .ok_or_else(|| Error::Input(format!("{} lacks a snapshot header", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn set(values: &[f64]) -> ParameterSet {
        let mut p = ParameterSet::new();
        p.insert("w", Tensor::new(vec![1, values.len()], values.to_vec()).unwrap(), Group::Encoder);
        p
    }

    fn values(p: &ParameterSet) -> Vec<f64> {
        p.tensor("w").unwrap().data().to_vec()
    }

    #[test]
    fn averaging_examples() {
        let avg = average_parameters(&[set(&[1.0, 2.0]), set(&[3.0, 6.0])]).unwrap();
        assert_eq!(values(&avg), vec![2.0, 4.0]);
        let one = set(&[0.1, -0.7]);
        assert_eq!(average_parameters(std::slice::from_ref(&one)).unwrap(), one);
        assert!(average_parameters(&[]).is_err());
        let err = average_parameters(&[set(&[1.0]), set(&[1.0, 2.0])]).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn ring_keeps_newest() {
        let mut ring = CheckpointRing::new(3).unwrap();
        for i in 1..=5 {
            ring.push(set(&[i as f64])).unwrap();
        }
        let held: Vec<f64> = ring.iter().map(|s| values(s)[0]).collect();
        assert_eq!(held, vec![3.0, 4.0, 5.0]);
        assert_eq!(ring.pushes(), 5);
        assert_eq!(values(&ring.window_mean().unwrap()), vec![4.0]);

        let mut single = CheckpointRing::new(1).unwrap();
        single.push(set(&[1.0])).unwrap();
        single.push(set(&[9.0])).unwrap();
        assert_eq!(values(&single.window_mean().unwrap()), vec![9.0]);
        assert!(CheckpointRing::new(0).is_err());
        assert!(CheckpointRing::new(2).unwrap().window_mean().is_err());
    }

    #[test]
    fn running_mean_examples() {
        let mut rm = RunningMean::new();
        for v in [2.0, 4.0, 6.0] {
            rm.update(&set(&[v])).unwrap();
        }
        assert_eq!(values(rm.mean().unwrap()), vec![4.0]);
        assert_eq!(rm.count(), 3);
    }

    #[test]
    fn persistence_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let mut ring = CheckpointRing::new(2).unwrap();
        for v in [0.1, 0.2, 0.3] {
            ring.push(set(&[v, -v])).unwrap();
        }
        let p = dir.path().join("ring.ckpt");
        ring.save(&p).unwrap();
        assert_eq!(CheckpointRing::load(&p).unwrap(), ring);

        let mut rm = RunningMean::new();
        let q = dir.path().join("mean.ckpt");
        rm.save(&q).unwrap();
        assert_eq!(RunningMean::load(&q).unwrap(), rm);
        rm.update(&set(&[1.0 / 3.0])).unwrap();
        rm.update(&set(&[0.7])).unwrap();
        rm.save(&q).unwrap();
        assert_eq!(RunningMean::load(&q).unwrap(), rm);

        assert!(CheckpointRing::load(&q).is_err());
    }

    fn arb_sets() -> impl Strategy<Value = Vec<Vec<f64>>> {
        (1usize..6, 1usize..12).prop_flat_map(|(dim, n)| {
            prop::collection::vec(prop::collection::vec(-100.0f64..100.0, dim), n)
        })
    }

    proptest! {
        #[test]
        fn running_mean_matches_batch_mean(raw in arb_sets()) {
            let sets: Vec<ParameterSet> = raw.iter().map(|v| set(v)).collect();
            let mut rm = RunningMean::new();
            for s in &sets {
                rm.update(s).unwrap();
            }
            let batch = average_parameters(&sets).unwrap();
            prop_assert!(rm.mean().unwrap().max_abs_diff(&batch) <= 1e-9);
        }

        #[test]
        fn window_mean_is_mean_of_last_k(raw in arb_sets(), k in 1usize..5) {
            let sets: Vec<ParameterSet> = raw.iter().map(|v| set(v)).collect();
            let mut ring = CheckpointRing::new(k).unwrap();
            for s in &sets {
                ring.push(s.clone()).unwrap();
            }
            let start = sets.len().saturating_sub(k);
            let expected = average_parameters(&sets[start..]).unwrap();
            prop_assert_eq!(ring.len(), sets.len().min(k));
            prop_assert_eq!(ring.window_mean().unwrap(), expected);
        }

        #[test]
        fn average_of_copies_is_identity(v in prop::collection::vec(-1e3f64..1e3, 1..8), n in 1usize..8) {
            let s = set(&v);
            let avg = average_parameters(&vec![s.clone(); n]).unwrap();
            for (a, b) in values(&avg).iter().zip(&v) {
                prop_assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
            }
        }
    }
}
