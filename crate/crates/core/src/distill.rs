//! Fine-tuning with an optional self-distillation term.
//!
//! In SDA mode the teacher is a model whose parameters are the mean of the
//! student's recent snapshots; in SDV mode the teacher output is the mean of
//! the recent snapshots' logits. Either way the student minimizes
//! `CE(student, y) + lambda * MSE(student logits, teacher logits)`, with the
//! teacher held constant.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Var};
use crate::data::{shuffle_with_seed, Batch, Encoded};
use crate::ensemble::{CheckpointRing, RunningMean};
use crate::error::{Error, Result};
use crate::harness::{evaluate, Metrics};
use crate::model::{init_params, reinit_head, Mode, TextClassifier};
use crate::optim::{adamw_step, AdamWConfig, Accumulator, OptimState};
use crate::params::{save_sets, ParameterSet};
use crate::rng::{mix, seeded, Rng};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Baseline,
    Sda,
    Sdv,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Baseline => "baseline",
            Method::Sda => "sda",
            Method::Sdv => "sdv",
        })
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "baseline" => Ok(Method::Baseline),
            "sda" => Ok(Method::Sda),
            "sdv" => Ok(Method::Sdv),
            _ => Err(format!("unknown mode `{s}` (expected baseline, sda or sdv)")),
        }
    }
}

/// How many past snapshots the teacher covers. `All` keeps every snapshot
/// since initialization as a running mean.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum TeacherSize {
    Last(usize),
    All,
}

impl fmt::Display for TeacherSize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TeacherSize::Last(k) => write!(f, "{k}"),
            TeacherSize::All => f.write_str("all"),
        }
    }
}

impl FromStr for TeacherSize {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s.eq_ignore_ascii_case("all") {
            return Ok(TeacherSize::All);
        }
        match s.parse::<usize>() {
            Ok(k) if k >= 1 => Ok(TeacherSize::Last(k)),
            _ => Err(format!("teacher size `{s}` must be a positive integer or `all`")),
        }
    }
}

impl TryFrom<String> for TeacherSize {
    type Error = String;

    fn try_from(s: String) -> Result<Self, String> {
        s.parse()
    }
}

impl From<TeacherSize> for String {
    fn from(k: TeacherSize) -> String {
        k.to_string()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub method: Method,
    pub lambda: f64,
    pub teacher_size: TeacherSize,
    /// Optimizer steps between teacher absorptions.
    pub snapshot_every: usize,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            method: Method::Baseline,
            lambda: 1.0,
            teacher_size: TeacherSize::Last(1),
            snapshot_every: 1,
        }
    }
}

impl DistillConfig {
    pub fn baseline() -> Self {
        Self::default()
    }

    pub fn sda(k: TeacherSize, lambda: f64) -> Self {
        DistillConfig {
            method: Method::Sda,
            lambda,
            teacher_size: k,
            snapshot_every: 1,
        }
    }

    pub fn sdv(k: usize, lambda: f64) -> Self {
        DistillConfig {
            method: Method::Sdv,
            lambda,
            teacher_size: TeacherSize::Last(k),
            snapshot_every: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::Config(format!(
                "distillation weight must be finite and >= 0, got {}",
                self.lambda
            )));
        }
        if self.teacher_size == TeacherSize::Last(0) {
            return Err(Error::Config("teacher size must be at least 1".into()));
        }
        if self.method == Method::Sdv && self.teacher_size == TeacherSize::All {
            return Err(Error::Config(
                "teacher size `all` is only available in sda mode".into(),
            ));
        }
        if self.snapshot_every == 0 {
            return Err(Error::Config("snapshot_every must be at least 1".into()));
        }
        Ok(())
    }

    /// Short label such as `sda(k=5,lambda=1)`.
    pub fn label(&self) -> String {
        match self.method {
            Method::Baseline => "baseline".into(),
            m => format!("{m}(k={},lambda={})", self.teacher_size, self.lambda),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalPolicy {
    /// Report the last epoch.
    Final,
    /// Report the epoch with the highest dev accuracy (earliest on ties).
    BestDev,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub micro_batch: usize,
    pub accum_steps: usize,
    pub eval_batch: usize,
    pub optim: AdamWConfig,
    pub eval_policy: EvalPolicy,
    /// Keep one loss row per optimizer step in the outcome.
    pub record_steps: bool,
    #[serde(skip)]
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 4,
            micro_batch: 8,
            accum_steps: 2,
            eval_batch: 64,
            optim: AdamWConfig::default(),
            eval_policy: EvalPolicy::Final,
            record_steps: true,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.micro_batch == 0 || self.accum_steps == 0 || self.eval_batch == 0 {
            return Err(Error::Config(
                "micro_batch, accum_steps and eval_batch must be positive".into(),
            ));
        }
        self.optim.validate()
    }

    /// Optimizer steps for `n_train` examples, flushing partial accumulation
    /// windows at the end of every epoch.
    pub fn total_steps(&self, n_train: usize) -> usize {
        n_train.div_ceil(self.micro_batch).div_ceil(self.accum_steps) * self.epochs
    }
}

/// Seeds of one run. The encoder and head are drawn from `init` unless
/// `head` gives the head its own draw; `data` drives the example order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub init: u64,
    pub data: u64,
    pub head: Option<u64>,
}

impl Seeds {
    pub fn new(init: u64, data: u64) -> Self {
        Seeds {
            init,
            data,
            head: None,
        }
    }

    fn dropout(&self) -> u64 {
        mix(self.init, self.head.unwrap_or(self.init))
    }
}

/// Encoded splits for one run.
#[derive(Clone, Debug, Default)]
pub struct RunData {
    pub train: Vec<Encoded>,
    pub dev: Option<Vec<Encoded>>,
    pub test: Vec<Encoded>,
}

/// Loss parts of one forward pass, on the tape.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: Var,
    pub ce: Var,
    pub mse: Option<Var>,
}

/// `CE(student, labels) + lambda * MSE(student, teacher)` with the teacher
/// logits entering as a constant.
pub fn sda_loss(
    tape: &mut Tape,
    student: Var,
    teacher: Option<&Tensor>,
    labels: &[usize],
    lambda: f64,
) -> Result<LossParts> {
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(Error::Config(format!("negative or non-finite weight {lambda}")));
    }
    let ce = tape.cross_entropy(student, labels)?;
    let Some(teacher) = teacher else {
        return Ok(LossParts { total: ce, ce, mse: None });
    };
    let t = tape.constant(teacher.clone());
    let mse = tape.mse(student, t)?;
    let total = if lambda > 0.0 {
        let weighted = tape.scale(mse, lambda);
        tape.add(ce, weighted)?
    } else {
        ce
    };
    Ok(LossParts {
        total,
        ce,
        mse: Some(mse),
    })
}

/// Eval-mode logits averaged over `snapshots`.
pub fn mean_logits<'a>(
    model: &TextClassifier,
    snapshots: impl ExactSizeIterator<Item = &'a ParameterSet>,
    batch: &Batch,
) -> Result<Tensor> {
    let n = snapshots.len();
    let mut sum: Option<Tensor> = None;
    for s in snapshots {
        let l = model.logits(s, batch)?;
        match &mut sum {
            None => sum = Some(l),
            Some(acc) => acc.add_assign(&l),
        }
    }
    let mut out = sum.ok_or_else(|| Error::Contract("teacher holds no snapshots".into()))?;
    if n > 1 {
        for v in out.data_mut() {
            *v /= n as f64;
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
enum Snapshots {
    Window(CheckpointRing),
    All(RunningMean),
}

/// Forward-pass instrumentation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub student_forwards: u64,
    pub teacher_forwards: u64,
    pub optimizer_steps: u64,
    pub absorptions: u64,
}

/// Losses and learning rate of one optimizer step, averaged over its
/// micro-batches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepPoint {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub ce: f64,
    pub mse: Option<f64>,
    pub lr: f64,
}

/// Losses of one micro-batch, plus the optimizer step it completed, if any.
#[derive(Clone, Debug, PartialEq)]
pub struct MicroStep {
    pub loss: f64,
    pub ce: f64,
    pub mse: Option<f64>,
    pub step: Option<StepPoint>,
}

#[derive(Clone, Copy, Debug, Default)]
struct LossSums {
    loss: f64,
    ce: f64,
    mse: f64,
    has_mse: bool,
    n: usize,
}

impl LossSums {
    fn add(&mut self, loss: f64, ce: f64, mse: Option<f64>) {
        self.loss += loss;
        self.ce += ce;
        if let Some(m) = mse {
            self.mse += m;
            self.has_mse = true;
        }
        self.n += 1;
    }

    fn mean(&self) -> (f64, f64, Option<f64>) {
        let n = self.n.max(1) as f64;
        (
            self.loss / n,
            self.ce / n,
            self.has_mse.then(|| self.mse / n),
        )
    }
}

/// Everything one run mutates.
#[derive(Clone, Debug)]
pub struct TrainState {
    model: TextClassifier,
    distill: DistillConfig,
    accum_steps: usize,
    pub params: ParameterSet,
    pub optim: OptimState,
    teacher: Option<Snapshots>,
    sda_cache: Option<ParameterSet>,
    since_snapshot: usize,
    accum: Accumulator,
    pending: LossSums,
    dropout_rng: Rng,
    pub counters: Counters,
    pub epoch: usize,
}

impl TrainState {
    /// Starts from `params`, seeding any teacher state with them.
    pub fn new(
        model: TextClassifier,
        params: ParameterSet,
        distill: DistillConfig,
        optim: AdamWConfig,
        total_steps: usize,
        accum_steps: usize,
        dropout_seed: u64,
    ) -> Result<Self> {
        distill.validate()?;
        if accum_steps == 0 {
            return Err(Error::Config("accum_steps must be positive".into()));
        }
        let teacher = match (distill.method, distill.teacher_size) {
            (Method::Baseline, _) => None,
            (_, TeacherSize::All) => {
                let mut rm = RunningMean::new();
                rm.update(&params)?;
                Some(Snapshots::All(rm))
            }
            (_, TeacherSize::Last(k)) => {
                let mut ring = CheckpointRing::new(k)?;
                ring.push(params.clone())?;
                Some(Snapshots::Window(ring))
            }
        };
        Ok(TrainState {
            optim: OptimState::new(&params, optim, total_steps)?,
            model,
            distill,
            accum_steps,
            params,
            teacher,
            sda_cache: None,
            since_snapshot: 0,
            accum: Accumulator::default(),
            pending: LossSums::default(),
            dropout_rng: seeded(dropout_seed, 3),
            counters: Counters::default(),
            epoch: 0,
        })
    }

    pub fn model(&self) -> &TextClassifier {
        &self.model
    }

    pub fn distill(&self) -> &DistillConfig {
        &self.distill
    }

    /// Number of snapshots the teacher currently covers.
    pub fn teacher_len(&self) -> usize {
        match &self.teacher {
            None => 0,
            Some(Snapshots::Window(r)) => r.len(),
            Some(Snapshots::All(m)) => m.count() as usize,
        }
    }

    /// The parameter-averaged teacher (SDA mode only). Never includes the
    /// parameters produced by the most recent update until they are absorbed.
    pub fn sda_teacher(&mut self) -> Result<&ParameterSet> {
        if self.distill.method != Method::Sda {
            return Err(Error::Usage(format!(
                "averaged teacher requested in {} mode",
                self.distill.method
            )));
        }
        if self.sda_cache.is_none() {
            let mean = match self.teacher.as_ref().expect("sda mode keeps snapshots") {
                Snapshots::Window(r) => r.window_mean()?,
                Snapshots::All(m) => m.mean().expect("seeded at start").clone(),
            };
            self.sda_cache = Some(mean);
        }
        Ok(self.sda_cache.as_ref().expect("just filled"))
    }

    /// Mean logits of the retained snapshots (SDV mode only).
    pub fn sdv_teacher_logits(&mut self, batch: &Batch) -> Result<Tensor> {
        let Some(Snapshots::Window(ring)) = self.teacher.as_ref().filter(|_| self.distill.method == Method::Sdv) else {
            return Err(Error::Usage(format!(
                "voted teacher requested in {} mode",
                self.distill.method
            )));
        };
        self.counters.teacher_forwards += ring.len() as u64;
        mean_logits(&self.model, ring.iter(), batch)
    }

    fn teacher_logits(&mut self, batch: &Batch) -> Result<Option<Tensor>> {
        match self.distill.method {
            Method::Baseline => Ok(None),
            Method::Sda => {
                self.sda_teacher()?;
                self.counters.teacher_forwards += 1;
                let teacher = self.sda_cache.as_ref().expect("filled by sda_teacher");
                Ok(Some(self.model.logits(teacher, batch)?))
            }
            Method::Sdv => self.sdv_teacher_logits(batch).map(Some),
        }
    }

    /// Forward/backward on one micro-batch; runs the optimizer when an
    /// accumulation window completes.
    pub fn train_step(&mut self, batch: &Batch) -> Result<MicroStep> {
        let teacher = self.teacher_logits(batch)?;
        let mut tape = Tape::new();
        let bound = tape.bind(&self.params, true);
        let logits = self
            .model
            .classify(&bound, batch, Mode::Train(&mut self.dropout_rng), &mut tape)?;
        self.counters.student_forwards += 1;
        let parts = sda_loss(&mut tape, logits, teacher.as_ref(), &batch.labels, self.distill.lambda)?;
        let loss = tape.value(parts.total).item();
        let ce = tape.value(parts.ce).item();
        let mse = parts.mse.map(|m| tape.value(m).item());
        if !loss.is_finite() {
            return Err(Error::Divergence {
                step: self.optim.step + 1,
                message: format!("loss is {loss} (ce {ce}, mse {mse:?})"),
            });
        }
        let grads = tape.backward(parts.total)?;
        self.pending.add(loss, ce, mse);
        Ok(MicroStep {
            loss,
            ce,
            mse,
            step: self.accumulate(grads)?,
        })
    }

    fn accumulate(&mut self, grads: Gradients) -> Result<Option<StepPoint>> {
        self.accum.add(&grads)?;
        if self.accum.len() == self.accum_steps {
            self.optimizer_step().map(Some)
        } else {
            Ok(None)
        }
    }

    /// Applies any partially accumulated gradients.
    pub fn flush(&mut self) -> Result<Option<StepPoint>> {
        if self.accum.is_empty() {
            Ok(None)
        } else {
            self.optimizer_step().map(Some)
        }
    }

    fn optimizer_step(&mut self) -> Result<StepPoint> {
        let grads = self.accum.take_mean()?;
        let lr = adamw_step(&mut self.params, &grads, &mut self.optim)?;
        self.counters.optimizer_steps += 1;
        if !self.params.is_finite() {
            return Err(Error::Divergence {
                step: self.optim.step,
                message: "parameters became non-finite".into(),
            });
        }
        self.since_snapshot += 1;
        if self.since_snapshot == self.distill.snapshot_every {
            self.since_snapshot = 0;
            self.absorb()?;
        }
        let (loss, ce, mse) = self.pending.mean();
        self.pending = LossSums::default();
        Ok(StepPoint {
            step: self.optim.step,
            epoch: self.epoch,
            loss,
            ce,
            mse,
            lr,
        })
    }

    fn absorb(&mut self) -> Result<()> {
        match &mut self.teacher {
            None => return Ok(()),
            Some(Snapshots::Window(r)) => r.push(self.params.clone())?,
            Some(Snapshots::All(m)) => m.update(&self.params)?,
        }
        self.sda_cache = None;
        self.counters.absorptions += 1;
        Ok(())
    }

    /// Snapshot-buffer contents for checkpointing.
    pub fn teacher_snapshots(&self) -> Vec<ParameterSet> {
        match &self.teacher {
            None => Vec::new(),
            Some(Snapshots::Window(r)) => r.iter().cloned().collect(),
            Some(Snapshots::All(m)) => m.mean().into_iter().cloned().collect(),
        }
    }
}

/// Per-epoch curve point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochPoint {
    pub epoch: usize,
    pub test_error: f64,
    pub test_accuracy: f64,
    pub ce: f64,
    pub mse: Option<f64>,
    pub lr: f64,
    pub dev_accuracy: Option<f64>,
    pub teacher_test_error: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct Outcome {
    pub params: ParameterSet,
    /// Final averaged teacher in SDA mode.
    pub teacher: Option<ParameterSet>,
    pub student: Metrics,
    pub teacher_metrics: Option<Metrics>,
    /// Epoch whose metrics are reported (0 when no epoch ran).
    pub selected_epoch: usize,
    pub curve: Vec<EpochPoint>,
    pub steps: Vec<StepPoint>,
    pub counters: Counters,
    pub total_steps: usize,
}

/// Initial parameters for `seeds`.
pub fn initial_params(model: &TextClassifier, seeds: &Seeds) -> Result<ParameterSet> {
    let mut p = init_params(model.config(), seeds.init)?;
    if let Some(h) = seeds.head {
        reinit_head(&mut p, model.config(), h)?;
    }
    Ok(p)
}

/// Trains for `train.epochs` epochs, evaluating on the test (and dev) split
/// after each one.
pub fn fine_tune(
    model: &TextClassifier,
    distill: &DistillConfig,
    train: &TrainConfig,
    data: &RunData,
    seeds: &Seeds,
) -> Result<Outcome> {
    train.validate()?;
    distill.validate()?;
    if data.train.is_empty() || data.test.is_empty() {
        return Err(Error::Input("training and test splits must be non-empty".into()));
    }
    if train.eval_policy == EvalPolicy::BestDev && data.dev.as_ref().is_none_or(|d| d.is_empty()) {
        return Err(Error::Config("best-dev evaluation needs a non-empty dev split".into()));
    }
    let total_steps = train.total_steps(data.train.len());
    let params = initial_params(model, seeds)?;
    let mut state = TrainState::new(
        model.clone(),
        params,
        distill.clone(),
        train.optim.clone(),
        total_steps,
        train.accum_steps,
        seeds.dropout(),
    )?;
    if let Some(dir) = &train.checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let mut curve = Vec::with_capacity(train.epochs);
    let mut steps = Vec::new();
    let mut best: Option<(f64, usize, ParameterSet, Option<ParameterSet>)> = None;
    for epoch in 1..=train.epochs {
        state.epoch = epoch;
        let order = shuffle_with_seed(data.train.len(), mix(seeds.data, epoch as u64));
        let mut sums = LossSums::default();
        let mut last_lr = 0.0;
        for idx in order.chunks(train.micro_batch) {
            let rows: Vec<&Encoded> = idx.iter().map(|&i| &data.train[i]).collect();
            let batch = Batch::from_encoded(&rows)?;
            let micro = state.train_step(&batch)?;
            sums.add(micro.loss, micro.ce, micro.mse);
            if let Some(p) = micro.step {
                last_lr = p.lr;
                if train.record_steps {
                    steps.push(p);
                }
            }
        }
        if let Some(p) = state.flush()? {
            last_lr = p.lr;
            if train.record_steps {
                steps.push(p);
            }
        }

        let test = evaluate(model, &state.params, &data.test, train.eval_batch)?;
        let dev = match &data.dev {
            Some(d) if !d.is_empty() => Some(evaluate(model, &state.params, d, train.eval_batch)?),
            _ => None,
        };
        let teacher_test = if distill.method == Method::Sda {
            let t = state.sda_teacher()?.clone();
            Some(evaluate(model, &t, &data.test, train.eval_batch)?)
        } else {
            None
        };
        let (_, ce, mse) = sums.mean();
        curve.push(EpochPoint {
            epoch,
            test_error: test.error,
            test_accuracy: test.accuracy,
            ce,
            mse,
            lr: last_lr,
            dev_accuracy: dev.map(|d| d.accuracy),
            teacher_test_error: teacher_test.map(|t| t.error),
        });
        if let Some(d) = dev {
            if best.as_ref().is_none_or(|b| d.accuracy > b.0) {
                let teacher = match distill.method {
                    Method::Sda => Some(state.sda_teacher()?.clone()),
                    _ => None,
                };
                best = Some((d.accuracy, epoch, state.params.clone(), teacher));
            }
        }
        if let Some(dir) = &train.checkpoint_dir {
            let path = dir.join(format!("epoch-{epoch}.ckpt"));
            let mut sets = vec![state.params.clone()];
            sets.extend(state.teacher_snapshots());
            save_sets(&path, &sets)?;
        }
    }

    let (selected_epoch, params, teacher) = match (train.eval_policy, best) {
        (EvalPolicy::BestDev, Some((_, e, p, t))) => (e, p, t),
        _ => {
            let teacher = if distill.method == Method::Sda {
                Some(state.sda_teacher()?.clone())
            } else {
                None
            };
            (train.epochs, state.params.clone(), teacher)
        }
    };
    let student = evaluate(model, &params, &data.test, train.eval_batch)?;
    let teacher_metrics = match &teacher {
        Some(t) => Some(evaluate(model, t, &data.test, train.eval_batch)?),
        None => None,
    };
    Ok(Outcome {
        params,
        teacher,
        student,
        teacher_metrics,
        selected_epoch,
        curve,
        steps,
        counters: state.counters,
        total_steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use crate::data::{encode_split, make_synthetic, SyntheticSpec, Vocab};
    use crate::model::ModelConfig;
    use crate::params::Group;
    use proptest::prelude::*;

    fn tiny_model(vocab: usize, n_classes: usize) -> TextClassifier {
        TextClassifier::new(ModelConfig {
            vocab_size: vocab,
            max_len: 20,
            dim: 8,
            n_layers: 1,
            n_heads: 2,
            ffn_dim: 16,
            n_classes,
            dropout_p: 0.0,
            init_std: 0.1,
        })
        .unwrap()
    }

    fn tiny_data(spec: &SyntheticSpec, seed: u64) -> (Vocab, RunData) {
        let d = make_synthetic(spec, seed).unwrap();
        let vocab = Vocab::build(d.train.texts(), 500, 1).unwrap();
        let data = RunData {
            train: encode_split(&d.train, &vocab, 20).unwrap(),
            dev: None,
            test: encode_split(&d.test, &vocab, 20).unwrap(),
        };
        (vocab, data)
    }

    fn small_spec() -> SyntheticSpec {
        SyntheticSpec {
            n_classes: 3,
            vocab_span: 60,
            min_tokens: 4,
            max_tokens: 8,
            signal: 0.6,
            label_noise: 0.1,
            n_train: 96,
            n_test: 48,
            ..SyntheticSpec::default()
        }
    }

    fn small_train(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            micro_batch: 8,
            accum_steps: 2,
            eval_batch: 16,
            ..TrainConfig::default()
        }
    }

    fn loss_of(student: &Tensor, teacher: Option<&Tensor>, labels: &[usize], lambda: f64) -> (f64, f64, Option<f64>) {
        let mut tape = Tape::new();
        let s = tape.constant(student.clone());
        let p = sda_loss(&mut tape, s, teacher, labels, lambda).unwrap();
        (
            tape.value(p.total).item(),
            tape.value(p.ce).item(),
            p.mse.map(|m| tape.value(m).item()),
        )
    }

    #[test]
    fn loss_examples() {
        let o = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let z = Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap();
        let (total, ce, mse) = loss_of(&o, Some(&z), &[0], 1.0);
        // ln(1 + e^-1) and mean((1-0)^2, 0^2).
        let ce_ref = (1.0 + (-1.0f64).exp()).ln();
        assert!((ce - ce_ref).abs() < 1e-12 && (ce - 0.31326).abs() < 1e-5);
        assert_eq!(mse, Some(0.5));
        assert!((total - 0.81326).abs() < 1e-5);

        let (total0, ce0, _) = loss_of(&o, Some(&z), &[0], 0.0);
        assert_eq!(total0, ce0);
        let (_, _, same) = loss_of(&o, Some(&o), &[1], 2.0);
        assert_eq!(same, Some(0.0));

        let mut tape = Tape::new();
        let s = tape.constant(o.clone());
        assert!(sda_loss(&mut tape, s, Some(&z), &[0], -1.0).is_err());
        let wide = Tensor::from_rows(&[vec![0.0, 0.0, 0.0]]).unwrap();
        assert!(sda_loss(&mut tape, s, Some(&wide), &[0], 1.0).is_err());
    }

    proptest! {
        #[test]
        fn loss_parts_and_gradient(
            rows in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 3), 1..5),
            shift in prop::collection::vec(-2.0f64..2.0, 3),
            lambda in 0.0f64..3.0,
        ) {
            let b = rows.len();
            let student = Tensor::from_rows(&rows).unwrap();
            let teacher = Tensor::from_rows(
                &rows.iter().map(|r| r.iter().zip(&shift).map(|(x, s)| x + s).collect()).collect::<Vec<Vec<f64>>>(),
            ).unwrap();
            let labels: Vec<usize> = (0..b).map(|i| i % 3).collect();

            let mut tape = Tape::new();
            let s = tape.param("s", student.clone());
            let parts = sda_loss(&mut tape, s, Some(&teacher), &labels, lambda).unwrap();
            let total = tape.value(parts.total).item();
            let ce = tape.value(parts.ce).item();
            let mse = tape.value(parts.mse.unwrap()).item();
            prop_assert!(total >= 0.0 && total >= ce - 1e-15);
            prop_assert!((total - (ce + lambda * mse)).abs() <= 1e-12 * total.max(1.0));

            let grads = tape.backward(parts.total).unwrap();
            prop_assert_eq!(grads.len(), 1);
            let probs = student.softmax_rows();
            let g = grads.get("s").unwrap();
            for (i, &y) in labels.iter().enumerate() {
                for c in 0..3 {
                    let onehot = if y == c { 1.0 } else { 0.0 };
                    let k = i * 3 + c;
                    let expected = (probs.data()[k] - onehot) / b as f64
                        + lambda * 2.0 / (b * 3) as f64 * (student.data()[k] - teacher.data()[k]);
                    prop_assert!((g.data()[k] - expected).abs() < 1e-8);
                }
            }
        }
    }

    fn set(v: f64) -> ParameterSet {
        let mut p = ParameterSet::new();
        p.insert("w", Tensor::new(vec![1, 2], vec![v, -v]).unwrap(), Group::Encoder);
        p
    }

    fn bare_state(distill: DistillConfig, init: ParameterSet) -> TrainState {
        TrainState::new(tiny_model(10, 2), init, distill, AdamWConfig::default(), 10, 1, 0).unwrap()
    }

    #[test]
    fn sda_teacher_examples() {
        let mut st = bare_state(DistillConfig::sda(TeacherSize::Last(2), 1.0), set(1.0));
        assert_eq!(st.sda_teacher().unwrap(), &set(1.0));
        st.params = set(3.0);
        st.absorb().unwrap();
        st.params = set(5.0);
        st.absorb().unwrap();
        assert_eq!(st.sda_teacher().unwrap(), &set(4.0));

        let mut all = bare_state(DistillConfig::sda(TeacherSize::All, 1.0), set(0.0));
        let snaps: Vec<f64> = (1..=30).map(|i| (i as f64).sin()).collect();
        for &v in &snaps {
            all.params = set(v);
            all.absorb().unwrap();
        }
        let brute = (snaps.iter().sum::<f64>()) / 31.0;
        let got = all.sda_teacher().unwrap().tensor("w").unwrap().data()[0];
        assert!((got - brute).abs() < 1e-6);
        assert_eq!(all.teacher_len(), 31);

        let mut base = bare_state(DistillConfig::baseline(), set(0.0));
        assert!(matches!(base.sda_teacher(), Err(Error::Usage(_))));
        let mut sdv = bare_state(DistillConfig::sdv(2, 1.0), set(0.0));
        assert!(sdv.sda_teacher().is_err());
    }

    #[test]
    fn config_validation() {
        assert!(DistillConfig::sdv(1, 1.0).validate().is_ok());
        let bad = [
            DistillConfig { teacher_size: TeacherSize::All, ..DistillConfig::sdv(1, 1.0) },
            DistillConfig::sda(TeacherSize::Last(0), 1.0),
            DistillConfig::sda(TeacherSize::Last(1), -0.5),
            DistillConfig { snapshot_every: 0, ..DistillConfig::default() },
        ];
        for c in bad {
            assert!(matches!(c.validate(), Err(Error::Config(_))), "{c:?}");
        }
        assert_eq!("ALL".parse::<TeacherSize>().unwrap(), TeacherSize::All);
        assert_eq!("3".parse::<TeacherSize>().unwrap(), TeacherSize::Last(3));
        assert!("0".parse::<TeacherSize>().is_err());
        let json = serde_json::to_string(&DistillConfig::sda(TeacherSize::All, 1.5)).unwrap();
        assert!(json.contains("\"all\""));
        assert_eq!(
            serde_json::from_str::<DistillConfig>(&json).unwrap(),
            DistillConfig::sda(TeacherSize::All, 1.5)
        );
    }

    #[test]
    fn sdv_teacher_matches_per_snapshot_forwards() {
        let model = tiny_model(30, 3);
        let (_, data) = tiny_data(&SyntheticSpec { vocab_span: 25, ..small_spec() }, 1);
        let rows: Vec<&Encoded> = data.train.iter().take(5).collect();
        let batch = Batch::from_encoded(&rows).unwrap();
        let snaps: Vec<ParameterSet> = (0..3).map(|s| init_params(model.config(), 10 + s).unwrap()).collect();

        let mut st = TrainState::new(model.clone(), snaps[0].clone(), DistillConfig::sdv(3, 1.0), AdamWConfig::default(), 10, 1, 0).unwrap();
        for s in &snaps[1..] {
            st.params = s.clone();
            st.absorb().unwrap();
        }
        let got = st.sdv_teacher_logits(&batch).unwrap();
        let mut brute = Tensor::zeros(got.shape());
        for s in &snaps {
            brute.axpy(1.0 / 3.0, &model.logits(s, &batch).unwrap());
        }
        assert!(got.max_abs_diff(&brute) < 1e-10);
        assert_eq!(st.counters.teacher_forwards, 3);

        let same = mean_logits(&model, vec![snaps[1].clone(); 4].iter(), &batch).unwrap();
        assert!(same.max_abs_diff(&model.logits(&snaps[1], &batch).unwrap()) < 1e-12);
    }

    #[test]
    fn teacher_gets_no_gradient() {
        let model = tiny_model(30, 3);
        let (_, data) = tiny_data(&SyntheticSpec { vocab_span: 25, ..small_spec() }, 2);
        let rows: Vec<&Encoded> = data.train.iter().take(4).collect();
        let batch = Batch::from_encoded(&rows).unwrap();
        let params = init_params(model.config(), 3).unwrap();
        let teacher_a = model.logits(&init_params(model.config(), 4).unwrap(), &batch).unwrap();
        let teacher_b = teacher_a.scale(1.7);

        let run = |teacher: &Tensor| {
            let mut tape = Tape::new();
            let bound = tape.bind(&params, true);
            let out = model.classify(&bound, &batch, Mode::Eval, &mut tape).unwrap();
            let parts = sda_loss(&mut tape, out, Some(teacher), &batch.labels, 1.0).unwrap();
            (tape.value(parts.total).item(), tape.backward(parts.total).unwrap())
        };
        let (la, ga) = run(&teacher_a);
        let (lb, gb) = run(&teacher_b);
        assert_ne!(la, lb);
        let names_a: Vec<&str> = ga.names().collect();
        assert_eq!(names_a, gb.names().collect::<Vec<_>>());
        assert_eq!(names_a, params.names().collect::<Vec<_>>());

        let check = grad_check(
            |tape, bound| {
                let out = model.classify(bound, &batch, Mode::Eval, tape)?;
                Ok(sda_loss(tape, out, Some(&teacher_b), &batch.labels, 1.0)?.total)
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(check.max_rel_error < 1e-4, "{check:?}");
    }

    fn run(distill: DistillConfig, train: &TrainConfig, data: &RunData, model: &TextClassifier) -> Outcome {
        fine_tune(model, &distill, train, data, &Seeds::new(5, 6)).unwrap()
    }

    #[test]
    fn zero_weight_matches_baseline_bitwise() {
        let (vocab, data) = tiny_data(&small_spec(), 3);
        let model = TextClassifier::new(ModelConfig {
            dropout_p: 0.2,
            ..tiny_model(vocab.len(), 3).config().clone()
        })
        .unwrap();
        let train = small_train(2);
        let base = run(DistillConfig::baseline(), &train, &data, &model);
        for d in [
            DistillConfig::sda(TeacherSize::Last(3), 0.0),
            DistillConfig::sda(TeacherSize::All, 0.0),
            DistillConfig::sdv(2, 0.0),
        ] {
            let o = run(d, &train, &data, &model);
            assert_eq!(o.params, base.params);
            let l: Vec<u64> = o.steps.iter().map(|s| s.loss.to_bits()).collect();
            let b: Vec<u64> = base.steps.iter().map(|s| s.loss.to_bits()).collect();
            assert_eq!(l, b);
        }
    }

    #[test]
    fn single_snapshot_teachers_agree() {
        let (vocab, data) = tiny_data(&small_spec(), 4);
        let model = TextClassifier::new(ModelConfig {
            dropout_p: 0.2,
            ..tiny_model(vocab.len(), 3).config().clone()
        })
        .unwrap();
        let train = small_train(2);
        let a = run(DistillConfig::sda(TeacherSize::Last(1), 1.0), &train, &data, &model);
        let v = run(DistillConfig::sdv(1, 1.0), &train, &data, &model);
        for (x, y) in a.steps.iter().zip(&v.steps) {
            assert!((x.loss - y.loss).abs() < 1e-9);
        }
        assert!(a.steps.iter().any(|s| s.mse.unwrap() > 0.0));
    }

    #[test]
    fn first_step_has_zero_distillation_loss() {
        let (vocab, data) = tiny_data(&small_spec(), 5);
        let model = TextClassifier::new(ModelConfig {
            init_std: 0.02,
            ..tiny_model(vocab.len(), 3).config().clone()
        })
        .unwrap();
        let o = run(DistillConfig::sda(TeacherSize::Last(1), 1.0), &small_train(1), &data, &model);
        assert_eq!(o.steps[0].mse, Some(0.0));
        let ln3 = 3.0f64.ln();
        assert!((o.steps[0].ce - ln3).abs() < 0.05 * ln3);
    }

    #[test]
    fn counters_match_batch_arithmetic() {
        let (vocab, data) = tiny_data(&small_spec(), 6);
        let model = tiny_model(vocab.len(), 3);
        let train = TrainConfig {
            micro_batch: 10,
            accum_steps: 3,
            ..small_train(2)
        };
        let micro = 96usize.div_ceil(10) as u64;
        let steps = train.total_steps(96);
        assert_eq!(steps, 4 * 2);

        let b = run(DistillConfig::baseline(), &train, &data, &model);
        assert_eq!(b.counters.student_forwards, micro * 2);
        assert_eq!(b.counters.teacher_forwards, 0);
        assert_eq!(b.counters.optimizer_steps as usize, steps);
        assert_eq!(b.steps.len(), steps);
        assert_eq!(b.steps.last().unwrap().step, steps);

        let a = run(DistillConfig::sda(TeacherSize::Last(2), 1.0), &train, &data, &model);
        assert_eq!(a.counters.teacher_forwards, micro * 2);
        assert_eq!(a.counters.absorptions as usize, steps);

        // The ring holds 1, 2, 3 snapshots after 0, 1, 2+ optimizer steps.
        let v = run(DistillConfig::sdv(3, 1.0), &train, &data, &model);
        let mut expected = 0u64;
        let mut held = 1u64;
        for _epoch in 0..2 {
            for m in 0..micro {
                expected += held;
                if (m + 1) % 3 == 0 || m + 1 == micro {
                    held = (held + 1).min(3);
                }
            }
        }
        assert_eq!(v.counters.teacher_forwards, expected);
    }

    #[test]
    fn snapshot_cadence() {
        let (vocab, data) = tiny_data(&small_spec(), 7);
        let model = tiny_model(vocab.len(), 3);
        let d = DistillConfig {
            snapshot_every: 3,
            ..DistillConfig::sda(TeacherSize::Last(4), 1.0)
        };
        let o = run(d, &small_train(2), &data, &model);
        assert_eq!(o.counters.absorptions, o.counters.optimizer_steps / 3);
    }

    #[test]
    fn zero_epochs_is_a_no_op() {
        let (vocab, data) = tiny_data(&small_spec(), 8);
        let model = tiny_model(vocab.len(), 3);
        let seeds = Seeds::new(5, 6);
        let o = fine_tune(&model, &DistillConfig::sda(TeacherSize::Last(2), 1.0), &small_train(0), &data, &seeds).unwrap();
        assert_eq!(o.params, initial_params(&model, &seeds).unwrap());
        assert!(o.curve.is_empty() && o.steps.is_empty());
        assert_eq!(o.total_steps, 0);
    }

    #[test]
    fn runs_are_deterministic() {
        let (vocab, data) = tiny_data(&small_spec(), 9);
        let model = tiny_model(vocab.len(), 3);
        let d = DistillConfig::sdv(2, 1.0);
        let a = run(d.clone(), &small_train(2), &data, &model);
        let b = run(d, &small_train(2), &data, &model);
        assert_eq!(a.params, b.params);
        assert_eq!(a.curve, b.curve);
        assert_eq!(a.steps, b.steps);
    }

    #[test]
    fn separable_data_is_fit() {
        use crate::data::{DatasetSplit, Example, Role};
        // Every class has its own word pool, so the classes are linearly
        // separable on bag-of-words features.
        let make = |n: usize, offset: usize| {
            let examples = (0..n)
                .map(|i| {
                    let c = i % 3;
                    let words: Vec<String> = (0..3 + i % 4)
                        .map(|j| format!("c{c}w{}", (i * 7 + j * 3 + offset) % 6))
                        .collect();
                    Example::single(words.join(" "), c)
                })
                .collect();
            DatasetSplit::new(examples, Role::Train, 3).unwrap()
        };
        let (train, test) = (make(120, 0), make(30, 1));
        let vocab = Vocab::build(train.texts(), 100, 1).unwrap();
        let data = RunData {
            train: encode_split(&train, &vocab, 20).unwrap(),
            dev: None,
            test: encode_split(&test, &vocab, 20).unwrap(),
        };
        let model = tiny_model(vocab.len(), 3);
        let train = TrainConfig {
            micro_batch: 4,
            accum_steps: 1,
            ..small_train(5)
        };
        let o = run(DistillConfig::baseline(), &train, &data, &model);
        let train_err = evaluate(&model, &o.params, &data.train, 32).unwrap().error;
        assert_eq!(train_err, 0.0);
        assert_eq!(o.curve.len(), 5);
    }

    #[test]
    fn best_dev_policy_needs_dev() {
        let (vocab, mut data) = tiny_data(&small_spec(), 11);
        let model = tiny_model(vocab.len(), 3);
        let train = TrainConfig {
            eval_policy: EvalPolicy::BestDev,
            ..small_train(3)
        };
        let seeds = Seeds::new(1, 1);
        let err = fine_tune(&model, &DistillConfig::baseline(), &train, &data, &seeds).unwrap_err();
        assert!(err.is_config());
        data.dev = Some(data.test.clone());
        let o = fine_tune(&model, &DistillConfig::baseline(), &train, &data, &seeds).unwrap();
        let best = o
            .curve
            .iter()
            .map(|p| p.dev_accuracy.unwrap())
            .fold(f64::MIN, f64::max);
        let first_best = o.curve.iter().find(|p| p.dev_accuracy == Some(best)).unwrap();
        assert_eq!(o.selected_epoch, first_best.epoch);
        assert_eq!(o.student.accuracy, best);
    }

    #[test]
    fn divergence_is_reported() {
        let (vocab, data) = tiny_data(&small_spec(), 12);
        let model = tiny_model(vocab.len(), 3);
        let mut train = small_train(1);
        train.optim.encoder_lr = f64::MAX;
        train.optim.head_lr = f64::MAX;
        let err = fine_tune(&model, &DistillConfig::baseline(), &train, &data, &Seeds::new(0, 0)).unwrap_err();
        assert!(matches!(err, Error::Divergence { .. }), "{err}");
        assert!(!err.is_config());
    }

    #[test]
    fn epoch_checkpoints_are_written() {
        let (vocab, data) = tiny_data(&small_spec(), 13);
        let model = tiny_model(vocab.len(), 3);
        let dir = tempfile::tempdir().unwrap();
        let train = TrainConfig {
            checkpoint_dir: Some(dir.path().to_path_buf()),
            ..small_train(2)
        };
        let o = run(DistillConfig::sda(TeacherSize::Last(2), 1.0), &train, &data, &model);
        let sets = crate::params::load_sets(&dir.path().join("epoch-2.ckpt")).unwrap();
        assert_eq!(sets[0], o.params);
        assert_eq!(sets.len(), 3);
    }
}
