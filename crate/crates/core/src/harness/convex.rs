//! Noisy SGD on a random strongly convex quadratic, comparing the final
//! iterate with the average of the tail iterates.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::ensemble::RunningMean;
use crate::error::{Error, Result};
use crate::params::{Group, ParameterSet};
use crate::rng::seeded;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvexConfig {
    pub dim: usize,
    pub steps: usize,
    /// Smallest eigenvalue added to the random Gram matrix.
    pub curvature: f64,
    pub noise: f64,
    /// Step size at t = 1; later steps use `step0 / t^decay`.
    pub step0: f64,
    pub decay: f64,
    /// Fraction of final iterates that are averaged.
    pub tail: f64,
}

impl Default for ConvexConfig {
    fn default() -> Self {
        ConvexConfig {
            dim: 20,
            steps: 5000,
            curvature: 0.5,
            noise: 1.0,
            step0: 0.2,
            decay: 0.5,
            tail: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvexOutcome {
    pub seed: u64,
    /// Distance of the last iterate from the minimizer.
    pub last_distance: f64,
    /// Distance of the tail average from the minimizer.
    pub averaged_distance: f64,
}

fn wrap(x: Tensor) -> ParameterSet {
    let mut p = ParameterSet::new();
    p.insert("x", x, Group::Encoder);
    p
}

pub fn convex_averaging(config: &ConvexConfig, seed: u64) -> Result<ConvexOutcome> {
    let d = config.dim;
    if d == 0 || config.steps == 0 || !(0.0..=1.0).contains(&config.tail) {
        return Err(Error::Config(format!("invalid convex experiment {config:?}")));
    }
    let mut rng = seeded(seed, 0x434f_4e56);
    let mut normal = |n: usize| -> Vec<f64> {
        (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
    };
    let m = Tensor::new(vec![d, d], normal(d * d))?;
    let mut mt = Tensor::zeros(&[d, d]);
    for i in 0..d {
        for j in 0..d {
            mt.data_mut()[j * d + i] = m.data()[i * d + j];
        }
    }
    let mut a = mt.matmul(&m)?.scale(1.0 / d as f64);
    for i in 0..d {
        a.data_mut()[i * d + i] += config.curvature;
    }
    let optimum = Tensor::new(vec![d, 1], normal(d))?;

    let mut x = Tensor::zeros(&[d, 1]);
    let tail_start = config.steps - ((config.steps as f64 * config.tail) as usize).min(config.steps);
    let mut avg = RunningMean::new();
    for t in 1..=config.steps {
        let mut diff = x.clone();
        diff.axpy(-1.0, &optimum);
        let mut g = a.matmul(&diff)?;
        g.axpy(config.noise, &Tensor::new(vec![d, 1], normal(d))?);
        let eta = config.step0 / (t as f64).powf(config.decay);
        x.axpy(-eta, &g);
        if t > tail_start {
            avg.update(&wrap(x.clone()))?;
        }
    }
    let dist = |v: &Tensor| {
        v.data()
            .iter()
            .zip(optimum.data())
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    let averaged = match avg.mean() {
        Some(p) => dist(p.tensor("x")?),
        None => dist(&x),
    };
    Ok(ConvexOutcome {
        seed,
        last_distance: dist(&x),
        averaged_distance: averaged,
    })
}
