//! Class-conditional bag-of-words corpora.
//!
//! Word `w{i}` is drawn either from a class-specific Zipf distribution (each
//! class ranks the vocabulary by its own permutation) with probability
//! `signal`, or from a shared background Zipf distribution. Training labels
//! are flipped to a different class with probability `label_noise`; test
//! labels are kept clean.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{DatasetSplit, Example, Role};
use crate::error::{Error, Result};
use crate::rng::seeded;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub n_classes: usize,
    pub vocab_span: usize,
    pub min_tokens: usize,
    pub max_tokens: usize,
    /// Probability that a token comes from the class distribution rather
    /// than the shared background.
    pub signal: f64,
    pub zipf_exponent: f64,
    pub label_noise: f64,
    pub n_train: usize,
    pub n_test: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_classes: 4,
            vocab_span: 400,
            min_tokens: 8,
            max_tokens: 16,
            signal: 0.25,
            zipf_exponent: 1.1,
            label_noise: 0.1,
            n_train: 2000,
            n_test: 1000,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let rate_ok = |r: f64| (0.0..=1.0).contains(&r);
        if self.n_classes < 2 {
            return Err(Error::Config("synthetic data needs at least 2 classes".into()));
        }
        if self.vocab_span == 0 {
            return Err(Error::Config("vocab_span must be positive".into()));
        }
        if self.min_tokens == 0 || self.min_tokens > self.max_tokens {
            return Err(Error::Config(format!(
                "token range {}..={} is invalid",
                self.min_tokens, self.max_tokens
            )));
        }
        if !rate_ok(self.signal) {
            return Err(Error::Config(format!("signal {} outside [0, 1]", self.signal)));
        }
        if !rate_ok(self.label_noise) {
            return Err(Error::Config(format!(
                "label noise {} outside [0, 1]",
                self.label_noise
            )));
        }
        if !(self.zipf_exponent.is_finite() && self.zipf_exponent >= 0.0) {
            return Err(Error::Config("zipf exponent must be finite and >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticData {
    pub train: DatasetSplit,
    pub test: DatasetSplit,
}

pub fn make_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = seeded(seed, 0x5359_4e54);
    let mut noise_rng = seeded(seed, 0x4e4f_4953);

    let mut rankings = Vec::with_capacity(spec.n_classes + 1);
    for _ in 0..=spec.n_classes {
        let mut perm: Vec<usize> = (0..spec.vocab_span).collect();
        perm.shuffle(&mut rng);
        rankings.push(perm);
    }
    let zipf = WeightedIndex::new(
        (0..spec.vocab_span).map(|r| 1.0 / ((r + 1) as f64).powf(spec.zipf_exponent)),
    )
    .map_err(|e| Error::Config(format!("token distribution: {e}")))?;
    let background = &rankings[spec.n_classes];

    let mut draw_split = |n: usize, noise: f64, role: Role| -> Result<DatasetSplit> {
        let mut labels: Vec<usize> = (0..n).map(|i| i % spec.n_classes).collect();
        labels.shuffle(&mut rng);
        let mut examples = Vec::with_capacity(n);
        for class in labels {
            let len = rng.random_range(spec.min_tokens..=spec.max_tokens);
            let words: Vec<String> = (0..len)
                .map(|_| {
                    let ranking = if rng.random::<f64>() < spec.signal {
                        &rankings[class]
                    } else {
                        background
                    };
                    format!("w{}", ranking[zipf.sample(&mut rng)])
                })
                .collect();
            let mut label = class;
            if noise > 0.0 && noise_rng.random::<f64>() < noise {
                let shift = noise_rng.random_range(1..spec.n_classes);
                label = (class + shift) % spec.n_classes;
            }
            examples.push(Example::single(words.join(" "), label));
        }
        DatasetSplit::new(examples, role, spec.n_classes)
    };

    let train = draw_split(spec.n_train, spec.label_noise, Role::Train)?;
    let test = draw_split(spec.n_test, 0.0, Role::Test)?;
    Ok(SyntheticData { train, test })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    /// Multinomial naive Bayes with add-one smoothing, fitted on train.
    fn naive_count_accuracy(data: &SyntheticData) -> f64 {
        let c = data.train.n_classes;
        let mut counts: Vec<HashMap<&str, f64>> = vec![HashMap::new(); c];
        let mut totals = vec![0.0; c];
        for e in &data.train.examples {
            for w in e.segments[0].split_whitespace() {
                *counts[e.label].entry(w).or_default() += 1.0;
                totals[e.label] += 1.0;
            }
        }
        let v = 1000.0;
        let correct = data
            .test
            .examples
            .iter()
            .filter(|e| {
                let scores: Vec<f64> = (0..c)
                    .map(|k| {
                        e.segments[0]
                            .split_whitespace()
                            .map(|w| {
                                ((counts[k].get(w).copied().unwrap_or(0.0) + 1.0)
                                    / (totals[k] + v))
                                    .ln()
                            })
                            .sum()
                    })
                    .collect();
                let best = (0..c)
                    .max_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap())
                    .unwrap();
                best == e.label
            })
            .count();
        correct as f64 / data.test.len() as f64
    }

    #[test]
    fn separated_classes_are_learnable_by_counting() {
        let spec = SyntheticSpec {
            signal: 0.8,
            label_noise: 0.0,
            n_train: 800,
            n_test: 400,
            ..SyntheticSpec::default()
        };
        let data = make_synthetic(&spec, 3).unwrap();
        let acc = naive_count_accuracy(&data);
        assert!(acc > 0.95, "accuracy {acc}");
    }

    #[test]
    fn identical_distributions_are_chance() {
        let spec = SyntheticSpec {
            n_classes: 2,
            signal: 0.0,
            label_noise: 0.5,
            n_train: 2000,
            n_test: 2000,
            ..SyntheticSpec::default()
        };
        let data = make_synthetic(&spec, 5).unwrap();
        let acc = naive_count_accuracy(&data);
        assert!((acc - 0.5).abs() < 0.05, "accuracy {acc}");
    }

    #[test]
    fn deterministic_per_seed() {
        let spec = SyntheticSpec {
            n_train: 50,
            n_test: 20,
            ..SyntheticSpec::default()
        };
        let a = make_synthetic(&spec, 11).unwrap();
        let b = make_synthetic(&spec, 11).unwrap();
        assert_eq!(a.train.to_tsv(), b.train.to_tsv());
        assert_eq!(a.test.to_tsv(), b.test.to_tsv());
        assert_ne!(a.train.to_tsv(), make_synthetic(&spec, 12).unwrap().train.to_tsv());
    }

    #[test]
    fn noise_rate_is_respected() {
        let spec = SyntheticSpec {
            signal: 1.0,
            label_noise: 0.1,
            n_train: 4000,
            n_test: 10,
            ..SyntheticSpec::default()
        };
        let clean = make_synthetic(&SyntheticSpec { label_noise: 0.0, ..spec.clone() }, 8).unwrap();
        assert_eq!(clean.train.class_counts(), vec![1000; 4]);
        let noisy = make_synthetic(&spec, 8).unwrap();
        // Noise draws come from their own stream, so texts line up.
        assert_eq!(noisy.test, clean.test);
        let flipped = noisy
            .train
            .examples
            .iter()
            .zip(&clean.train.examples)
            .filter(|(a, b)| {
                assert_eq!(a.segments, b.segments);
                a.label != b.label
            })
            .count();
        let rate = flipped as f64 / 4000.0;
        assert!((rate - 0.1).abs() < 0.015, "flip rate {rate}");
    }

    #[test]
    fn invalid_rates_are_rejected() {
        for spec in [
            SyntheticSpec { label_noise: 1.5, ..SyntheticSpec::default() },
            SyntheticSpec { signal: -0.1, ..SyntheticSpec::default() },
            SyntheticSpec { n_classes: 1, ..SyntheticSpec::default() },
            SyntheticSpec { min_tokens: 5, max_tokens: 4, ..SyntheticSpec::default() },
        ] {
            assert!(matches!(make_synthetic(&spec, 0), Err(Error::Config(_))));
        }
    }
}
