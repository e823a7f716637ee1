//! A small post-norm transformer encoder with a linear softmax head on the
//! first (`[CLS]`) position.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{AttentionShape, Bound, Tape, Var};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::params::{Group, ParameterSet};
use crate::rng::{seeded, Rng};
use crate::tensor::Tensor;

pub const CLASSIFIER: &str = "classifier.weight";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub max_len: usize,
    pub dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub n_classes: usize,
    pub dropout_p: f64,
    /// Standard deviation of the normal draw for weight matrices.
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 2000,
            max_len: 64,
            dim: 32,
            n_layers: 2,
            n_heads: 2,
            ffn_dim: 64,
            n_classes: 4,
            // An eval-mode teacher against a dropout-perturbed student drives
            // logits apart at this width, so dropout is off unless asked for.
            dropout_p: 0.0,
            init_std: 0.02,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.vocab_size == 0 || self.dim == 0 || self.ffn_dim == 0 {
            return fail("vocab_size, dim and ffn_dim must be positive".into());
        }
        if self.n_heads == 0 || !self.dim.is_multiple_of(self.n_heads) {
            return fail(format!(
                "dim {} is not divisible by {} heads",
                self.dim, self.n_heads
            ));
        }
        if self.max_len < 2 {
            return fail(format!("max_len {} leaves no room for [CLS]", self.max_len));
        }
        if self.n_classes == 0 {
            return fail("n_classes must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout_p));
        }
        if !(self.init_std.is_finite() && self.init_std > 0.0) {
            return fail(format!("init_std {} must be positive", self.init_std));
        }
        Ok(())
    }
}

/// Forward-pass mode. Dropout draws from the given stream in training mode.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut Rng),
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

fn layer_name(i: usize, rest: &str) -> String {
    format!("layer{i}.{rest}")
}

/// Draws fresh parameters. Encoder tensors and the classifier head come from
/// separate streams of `seed`, so [`reinit_head`] with the same seed is a
/// no-op.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<ParameterSet> {
    config.validate()?;
    let normal = Normal::new(0.0, config.init_std)
        .map_err(|e| Error::Config(format!("init distribution: {e}")))?;
    let mut rng = seeded(seed, 1);
    let mut draw = |shape: &[usize]| {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| normal.sample(&mut rng)).collect())
            .expect("shape matches draw count")
    };
    let (d, f) = (config.dim, config.ffn_dim);
    let mut p = ParameterSet::new();
    let enc = Group::Encoder;
    p.insert("embeddings.token", draw(&[config.vocab_size, d]), enc);
    p.insert("embeddings.position", draw(&[config.max_len, d]), enc);
    p.insert("embeddings.norm.gamma", Tensor::full(&[d], 1.0), enc);
    p.insert("embeddings.norm.beta", Tensor::zeros(&[d]), enc);
    for i in 0..config.n_layers {
        // Keys carry no bias: it shifts every score in a row equally and
        // cancels in the softmax.
        for proj in ["query", "key", "value", "output"] {
            p.insert(layer_name(i, &format!("attn.{proj}.weight")), draw(&[d, d]), enc);
            if proj != "key" {
                p.insert(layer_name(i, &format!("attn.{proj}.bias")), Tensor::zeros(&[d]), enc);
            }
        }
        p.insert(layer_name(i, "attn.norm.gamma"), Tensor::full(&[d], 1.0), enc);
        p.insert(layer_name(i, "attn.norm.beta"), Tensor::zeros(&[d]), enc);
        p.insert(layer_name(i, "ffn.in.weight"), draw(&[d, f]), enc);
        p.insert(layer_name(i, "ffn.in.bias"), Tensor::zeros(&[f]), enc);
        p.insert(layer_name(i, "ffn.out.weight"), draw(&[f, d]), enc);
        p.insert(layer_name(i, "ffn.out.bias"), Tensor::zeros(&[d]), enc);
        p.insert(layer_name(i, "ffn.norm.gamma"), Tensor::full(&[d], 1.0), enc);
        p.insert(layer_name(i, "ffn.norm.beta"), Tensor::zeros(&[d]), enc);
    }
    p.insert(CLASSIFIER, Tensor::zeros(&[config.n_classes, d]), Group::Head);
    reinit_head(&mut p, config, seed)?;
    Ok(p)
}

/// Redraws the classifier matrix from `seed`, leaving the encoder alone.
pub fn reinit_head(params: &mut ParameterSet, config: &ModelConfig, seed: u64) -> Result<()> {
    let normal = Normal::new(0.0, config.init_std)
        .map_err(|e| Error::Config(format!("init distribution: {e}")))?;
    let mut rng = seeded(seed, 2);
    let w = params.tensor_mut(CLASSIFIER)?;
    if w.shape() != [config.n_classes, config.dim] {
        return Err(Error::Shape(format!(
            "classifier {:?} does not match config",
            w.shape()
        )));
    }
    for v in w.data_mut() {
        *v = normal.sample(&mut rng);
    }
    Ok(())
}

/// Forward computations of the classifier for a fixed configuration.
#[derive(Clone, Debug)]
pub struct TextClassifier {
    config: ModelConfig,
}

impl TextClassifier {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(TextClassifier { config })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        if batch.seq_len > self.config.max_len {
            return Err(Error::Input(format!(
                "sequence length {} exceeds max_len {}",
                batch.seq_len, self.config.max_len
            )));
        }
        if batch.batch_size == 0 || batch.seq_len == 0 {
            return Err(Error::Input("empty batch".into()));
        }
        if batch.ids.len() != batch.batch_size * batch.seq_len
            || batch.mask.len() != batch.ids.len()
        {
            return Err(Error::Input("batch buffers do not match its shape".into()));
        }
        if let Some(&bad) = batch
            .ids
            .iter()
            .find(|&&id| id as usize >= self.config.vocab_size)
        {
            return Err(Error::Input(format!(
                "token id {bad} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    fn dropout(&self, tape: &mut Tape, x: Var, mode: &mut Mode<'_>) -> Result<Var> {
        let p = self.config.dropout_p;
        match mode {
            Mode::Train(rng) if p > 0.0 => {
                let keep = 1.0 / (1.0 - p);
                let mask = (0..tape.value(x).len())
                    .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
                    .collect();
                tape.dropout(x, mask)
            }
            _ => Ok(x),
        }
    }

    fn linear(&self, tape: &mut Tape, x: Var, params: &Bound, name: &str) -> Result<Var> {
        let h = tape.matmul(x, params.get(&format!("{name}.weight"))?)?;
        tape.add_bias(h, params.get(&format!("{name}.bias"))?)
    }

    fn norm(&self, tape: &mut Tape, x: Var, params: &Bound, name: &str) -> Result<Var> {
        tape.layer_norm(
            x,
            params.get(&format!("{name}.gamma"))?,
            params.get(&format!("{name}.beta"))?,
        )
    }

    /// Final hidden state of the first token of every row, `[B, dim]`.
    pub fn encode(
        &self,
        params: &Bound,
        batch: &Batch,
        mut mode: Mode<'_>,
        tape: &mut Tape,
    ) -> Result<Var> {
        self.check_batch(batch)?;
        let (b, l) = (batch.batch_size, batch.seq_len);
        let ids = batch.ids.iter().map(|&i| i as usize).collect();
        let tok = tape.gather(params.get("embeddings.token")?, ids)?;
        let positions = (0..b).flat_map(|_| 0..l).collect();
        let pos = tape.gather(params.get("embeddings.position")?, positions)?;
        let x = tape.add(tok, pos)?;
        let x = self.norm(tape, x, params, "embeddings.norm")?;
        let mut x = self.dropout(tape, x, &mut mode)?;

        let shape = AttentionShape {
            batch: b,
            seq: l,
            heads: self.config.n_heads,
        };
        for i in 0..self.config.n_layers {
            let q = self.linear(tape, x, params, &layer_name(i, "attn.query"))?;
            let k = tape.matmul(x, params.get(&layer_name(i, "attn.key.weight"))?)?;
            let v = self.linear(tape, x, params, &layer_name(i, "attn.value"))?;
            let a = tape.attention(q, k, v, shape, batch.mask.clone())?;
            let a = self.linear(tape, a, params, &layer_name(i, "attn.output"))?;
            let a = self.dropout(tape, a, &mut mode)?;
            let r = tape.add(x, a)?;
            x = self.norm(tape, r, params, &layer_name(i, "attn.norm"))?;

            let f = self.linear(tape, x, params, &layer_name(i, "ffn.in"))?;
            let f = tape.gelu(f);
            let f = self.linear(tape, f, params, &layer_name(i, "ffn.out"))?;
            let f = self.dropout(tape, f, &mut mode)?;
            let r = tape.add(x, f)?;
            x = self.norm(tape, r, params, &layer_name(i, "ffn.norm"))?;
        }
        tape.select_rows(x, (0..b).map(|r| r * l).collect())
    }

    /// Pre-softmax class scores `W h`, `[B, n_classes]`.
    pub fn classify(
        &self,
        params: &Bound,
        batch: &Batch,
        mode: Mode<'_>,
        tape: &mut Tape,
    ) -> Result<Var> {
        let h = self.encode(params, batch, mode, tape)?;
        tape.matmul_t(h, params.get(CLASSIFIER)?)
    }

    /// Eval-mode logits without gradient tracking.
    pub fn logits(&self, params: &ParameterSet, batch: &Batch) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = tape.bind(params, false);
        let out = self.classify(&bound, batch, Mode::Eval, &mut tape)?;
        Ok(tape.value(out).clone())
    }

    /// Class probabilities in eval mode.
    pub fn predict_proba(&self, params: &ParameterSet, batch: &Batch) -> Result<Tensor> {
        Ok(self.logits(params, batch)?.softmax_rows())
    }
}
