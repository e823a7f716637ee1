//! AdamW with linear warmup/decay, per-group learning rates and gradient
//! accumulation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::Gradients;
use crate::error::{Error, Result};
use crate::params::{Group, ParameterSet};
use crate::tensor::Tensor;

/// Linear ramp from 0 to `base_lr` over the first `warmup_prop * total`
/// steps, then linear decay to 0 at `total`. Steps past `total` clamp to 0.
pub fn lr_at(step: usize, total_steps: usize, base_lr: f64, warmup_prop: f64) -> f64 {
    if step > total_steps {
        log::warn!("learning-rate step {step} is past the schedule end {total_steps}");
        return 0.0;
    }
    if total_steps == 0 {
        return 0.0;
    }
    let (s, t) = (step as f64, total_steps as f64);
    let warm = warmup_prop * t;
    if s < warm {
        base_lr * s / warm
    } else if t > warm {
        base_lr * (t - s) / (t - warm)
    } else {
        base_lr
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub encoder_lr: f64,
    pub head_lr: f64,
    pub warmup_prop: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    /// Keeps the 1:50 encoder-to-head learning-rate ratio of BERT
    /// fine-tuning, scaled up for a model trained from scratch.
    fn default() -> Self {
        AdamWConfig {
            encoder_lr: 1e-3,
            head_lr: 5e-2,
            warmup_prop: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.encoder_lr >= 0.0
            && self.head_lr >= 0.0
            && self.warmup_prop > 0.0
            && self.warmup_prop < 1.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid AdamW settings {self:?}")))
        }
    }

    pub fn base_lr(&self, group: Group) -> f64 {
        match group {
            Group::Encoder => self.encoder_lr,
            Group::Head => self.head_lr,
        }
    }
}

/// Moment estimates and step counter for one parameter set.
#[derive(Clone, Debug)]
pub struct OptimState {
    pub config: AdamWConfig,
    pub step: usize,
    pub total_steps: usize,
    first: BTreeMap<String, Tensor>,
    second: BTreeMap<String, Tensor>,
}

impl OptimState {
    pub fn new(params: &ParameterSet, config: AdamWConfig, total_steps: usize) -> Result<Self> {
        config.validate()?;
        let zeros: BTreeMap<String, Tensor> = params
            .iter()
            .map(|(n, p)| (n.to_string(), Tensor::zeros(p.tensor.shape())))
            .collect();
        Ok(OptimState {
            config,
            step: 0,
            total_steps,
            first: zeros.clone(),
            second: zeros,
        })
    }

    /// Learning rate the next step will use for `group`.
    pub fn next_lr(&self, group: Group) -> f64 {
        lr_at(
            self.step + 1,
            self.total_steps,
            self.config.base_lr(group),
            self.config.warmup_prop,
        )
    }
}

/// One decoupled-weight-decay Adam update with bias correction. Returns the
/// encoder-group learning rate used.
pub fn adamw_step(
    params: &mut ParameterSet,
    grads: &Gradients,
    state: &mut OptimState,
) -> Result<f64> {
    if grads.len() != params.len() || params.names().any(|n| grads.get(n).is_none()) {
        let missing: Vec<&str> = params.names().filter(|n| grads.get(n).is_none()).collect();
        let extra: Vec<&str> = grads.names().filter(|n| params.get(n).is_none()).collect();
        return Err(Error::Contract(format!(
            "gradient names do not match parameters (missing {missing:?}, extra {extra:?})"
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let c = state.config.clone();
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    for (name, p) in params.iter_mut() {
        let g = grads.get(name).expect("checked above");
        if g.shape() != p.tensor.shape() {
            return Err(Error::Contract(format!(
                "gradient for `{name}` has shape {:?}, parameter {:?}",
                g.shape(),
                p.tensor.shape()
            )));
        }
        let lr = lr_at(state.step, state.total_steps, c.base_lr(p.group), c.warmup_prop);
        let decay = if p.decays() { lr * c.weight_decay } else { 0.0 };
        let m = state.first.get_mut(name).expect("moments track parameters");
        let v = state.second.get_mut(name).expect("moments track parameters");
        for (((w, gi), mi), vi) in p
            .tensor
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
            *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *w -= decay * *w;
            *w -= lr * m_hat / (v_hat.sqrt() + c.eps);
        }
    }
    Ok(lr_at(
        state.step,
        state.total_steps,
        c.encoder_lr,
        c.warmup_prop,
    ))
}

/// Elementwise mean of micro-batch gradients.
pub fn accumulate(micro_grads: &[Gradients]) -> Result<Gradients> {
    let mut acc = Accumulator::default();
    for g in micro_grads {
        acc.add(g)?;
    }
    acc.take_mean()
}

/// Running sum of micro-batch gradients.
#[derive(Clone, Debug, Default)]
pub struct Accumulator {
    sum: BTreeMap<String, Tensor>,
    count: usize,
}

impl Accumulator {
    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn add(&mut self, grads: &Gradients) -> Result<()> {
        if self.count == 0 {
            self.sum = grads.clone().into_inner();
        } else {
            let same = self.sum.len() == grads.len()
                && self.sum.keys().all(|k| grads.get(k).is_some());
            if !same {
                return Err(Error::Contract(
                    "micro-batch gradients have different parameter names".into(),
                ));
            }
            for (name, g) in grads.iter() {
                let s = self.sum.get_mut(name).expect("names checked");
                if s.shape() != g.shape() {
                    return Err(Error::Contract(format!("gradient shape for `{name}` changed")));
                }
                s.add_assign(g);
            }
        }
        self.count += 1;
        Ok(())
    }

    /// Mean of everything added since the last call, resetting the sum.
    pub fn take_mean(&mut self) -> Result<Gradients> {
        if self.count == 0 {
            return Err(Error::Contract("no gradients to accumulate".into()));
        }
        let n = self.count as f64;
        let mut out = std::mem::take(&mut self.sum);
        if self.count > 1 {
            for t in out.values_mut() {
                for v in t.data_mut() {
                    *v /= n;
                }
            }
        }
        self.count = 0;
        Ok(Gradients::new(out))
    }
}
