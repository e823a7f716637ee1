//! Experiment orchestration: single runs, ensembles, sweeps and stability
//! studies, all pure functions of their configs and seeds.

mod convex;
mod report;
mod stats;

use std::path::PathBuf;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use convex::{convex_averaging, ConvexConfig, ConvexOutcome};
pub use report::{emit_report, read_report, Report};
pub use stats::{relative_error_reduction, Summary};

use crate::data::{
    encode_split, load_csv, make_synthetic, Batch, CsvSchema, DatasetSplit, Encoded, Role,
    SyntheticSpec, Vocab,
};
use crate::distill::{
    fine_tune, Counters, DistillConfig, EpochPoint, Method, Outcome, RunData, Seeds, StepPoint,
    TeacherSize, TrainConfig,
};
use crate::ensemble::{average_parameters, voted_predict};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, TextClassifier};
use crate::params::ParameterSet;

/// Accuracy and error rate over a split.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub n: usize,
    pub correct: usize,
    pub accuracy: f64,
    pub error: f64,
}

impl Metrics {
    pub fn from_counts(correct: usize, n: usize) -> Result<Metrics> {
        if n == 0 {
            return Err(Error::Input("cannot evaluate on an empty split".into()));
        }
        let accuracy = correct as f64 / n as f64;
        Ok(Metrics {
            n,
            correct,
            accuracy,
            error: (n - correct) as f64 / n as f64,
        })
    }
}

fn count_correct(encoded: &[Encoded], batch_size: usize, mut predict: impl FnMut(&Batch) -> Result<Vec<usize>>) -> Result<Metrics> {
    if batch_size == 0 {
        return Err(Error::Config("evaluation batch size must be positive".into()));
    }
    let mut correct = 0;
    for rows in encoded.chunks(batch_size) {
        let refs: Vec<&Encoded> = rows.iter().collect();
        let batch = Batch::from_encoded(&refs)?;
        correct += predict(&batch)?
            .iter()
            .zip(&batch.labels)
            .filter(|(p, y)| p == y)
            .count();
    }
    Metrics::from_counts(correct, encoded.len())
}

/// Eval-mode accuracy of `params` on `encoded`, in file order.
pub fn evaluate(
    model: &TextClassifier,
    params: &ParameterSet,
    encoded: &[Encoded],
    batch_size: usize,
) -> Result<Metrics> {
    count_correct(encoded, batch_size, |b| {
        Ok(model.logits(params, b)?.argmax_rows())
    })
}

/// Accuracy of the probability-averaged vote of `members`.
pub fn evaluate_voted(
    model: &TextClassifier,
    members: &[ParameterSet],
    encoded: &[Encoded],
    batch_size: usize,
) -> Result<Metrics> {
    count_correct(encoded, batch_size, |b| {
        Ok(voted_predict(model, members, b)?.argmax_rows())
    })
}

/// Where examples come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase")]
pub enum DataSource {
    Synthetic {
        spec: SyntheticSpec,
        seed: u64,
    },
    Csv {
        train: PathBuf,
        test: PathBuf,
        dev: Option<PathBuf>,
        schema: CsvSchema,
    },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic {
            spec: SyntheticSpec::default(),
            seed: 0,
        }
    }
}

impl DataSource {
    /// Train, optional dev, and test splits.
    pub fn load(&self) -> Result<(DatasetSplit, Option<DatasetSplit>, DatasetSplit)> {
        match self {
            DataSource::Synthetic { spec, seed } => {
                let d = make_synthetic(spec, *seed)?;
                Ok((d.train, None, d.test))
            }
            DataSource::Csv {
                train,
                test,
                dev,
                schema,
            } => {
                let tr = load_csv(train, schema)?;
                let te = load_csv(test, schema)?.with_role(Role::Test);
                let dv = match dev {
                    Some(p) => Some(load_csv(p, schema)?.with_role(Role::Dev)),
                    None => None,
                };
                Ok((tr, dv, te))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VocabConfig {
    pub max_size: usize,
    pub min_freq: usize,
}

impl Default for VocabConfig {
    fn default() -> Self {
        VocabConfig {
            max_size: 2000,
            min_freq: 1,
        }
    }
}

/// Everything that determines one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub data: DataSource,
    pub vocab: VocabConfig,
    /// `vocab_size` and `n_classes` are overwritten from the data.
    pub model: ModelConfig,
    pub distill: DistillConfig,
    pub train: TrainConfig,
    pub seeds: Seeds,
    /// Record wall-clock time, which makes reports differ between reruns.
    #[serde(default)]
    pub timing: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            data: DataSource::default(),
            vocab: VocabConfig::default(),
            model: ModelConfig::default(),
            distill: DistillConfig::default(),
            train: TrainConfig::default(),
            seeds: Seeds::new(0, 0),
            timing: false,
        }
    }
}

/// Data encoded once and shared by every run of an experiment.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub vocab: Vocab,
    pub data: RunData,
    pub model: ModelConfig,
}

impl Prepared {
    pub fn classifier(&self) -> Result<TextClassifier> {
        TextClassifier::new(self.model.clone())
    }
}

pub fn prepare(config: &ExperimentConfig) -> Result<Prepared> {
    let (train, dev, test) = config.data.load()?;
    if train.n_classes != test.n_classes {
        return Err(Error::Input("train and test splits disagree on class count".into()));
    }
    let vocab = Vocab::build(train.texts(), config.vocab.max_size, config.vocab.min_freq)?;
    let max_len = config.model.max_len;
    let model = ModelConfig {
        vocab_size: vocab.len(),
        n_classes: train.n_classes,
        ..config.model.clone()
    };
    model.validate()?;
    let data = RunData {
        train: encode_split(&train, &vocab, max_len)?,
        dev: match &dev {
            Some(d) => Some(encode_split(d, &vocab, max_len)?),
            None => None,
        },
        test: encode_split(&test, &vocab, max_len)?,
    };
    Ok(Prepared { vocab, data, model })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum RunStatus {
    Completed,
    Failed { diagnostic: String },
}

/// Outcome of one fine-tuning run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub label: String,
    pub config: ExperimentConfig,
    pub status: RunStatus,
    pub total_steps: usize,
    pub selected_epoch: usize,
    pub student: Option<Metrics>,
    /// The averaged teacher, in SDA mode.
    pub teacher: Option<Metrics>,
    pub curve: Vec<EpochPoint>,
    pub steps: Vec<StepPoint>,
    pub counters: Counters,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_clock_secs: Option<f64>,
}

impl RunReport {
    pub fn completed(&self) -> bool {
        self.status == RunStatus::Completed
    }

    pub fn error_rate(&self) -> Option<f64> {
        self.student.map(|m| m.error)
    }
}

/// Runs `config` on already prepared data. Divergence yields a failed report;
/// other errors are returned.
pub fn run_prepared(
    prepared: &Prepared,
    config: &ExperimentConfig,
) -> Result<(RunReport, Option<Outcome>)> {
    let model = prepared.classifier()?;
    let start = Instant::now();
    let result = fine_tune(
        &model,
        &config.distill,
        &config.train,
        &prepared.data,
        &config.seeds,
    );
    let wall = config.timing.then(|| start.elapsed().as_secs_f64());
    let echo = ExperimentConfig {
        model: prepared.model.clone(),
        ..config.clone()
    };
    let label = config.distill.label();
    match result {
        Ok(out) => Ok((
            RunReport {
                label,
                config: echo,
                status: RunStatus::Completed,
                total_steps: out.total_steps,
                selected_epoch: out.selected_epoch,
                student: Some(out.student),
                teacher: out.teacher_metrics,
                curve: out.curve.clone(),
                steps: out.steps.clone(),
                counters: out.counters,
                wall_clock_secs: wall,
            },
            Some(out),
        )),
        Err(e @ Error::Divergence { .. }) => {
            log::warn!("{label}: {e}");
            Ok((
                RunReport {
                    label,
                    config: echo,
                    status: RunStatus::Failed {
                        diagnostic: e.to_string(),
                    },
                    total_steps: config.train.total_steps(prepared.data.train.len()),
                    selected_epoch: 0,
                    student: None,
                    teacher: None,
                    curve: Vec::new(),
                    steps: Vec::new(),
                    counters: Counters::default(),
                    wall_clock_secs: wall,
                },
                None,
            ))
        }
        Err(e) => Err(e),
    }
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<RunReport> {
    let prepared = prepare(config)?;
    Ok(run_prepared(&prepared, config)?.0)
}

/// Independently fine-tuned members and their combinations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleReport {
    pub member_seeds: Vec<u64>,
    pub members: Vec<RunReport>,
    /// Probability-averaged vote of the members.
    pub voted: Metrics,
    /// Single model with the members' mean parameters.
    pub averaged: Metrics,
    pub mean_member_error: f64,
    pub max_member_error: f64,
    /// Relative error reduction of the vote against the mean member.
    pub voted_reduction: Option<f64>,
    pub averaged_reduction: Option<f64>,
}

/// Seeds for member `seed` of an ensemble: the encoder comes from the shared
/// initialization seed, while the head and data order come from `seed`.
pub fn member_seeds(init: u64, seed: u64) -> Seeds {
    Seeds {
        init,
        data: seed,
        head: Some(seed),
    }
}

pub fn ensemble_experiment(config: &ExperimentConfig, seeds: &[u64]) -> Result<EnsembleReport> {
    let prepared = prepare(config)?;
    ensemble_prepared(&prepared, config, seeds)
}

pub fn ensemble_prepared(
    prepared: &Prepared,
    config: &ExperimentConfig,
    seeds: &[u64],
) -> Result<EnsembleReport> {
    if seeds.is_empty() {
        return Err(Error::Config("an ensemble needs at least one member".into()));
    }
    let runs: Vec<(RunReport, Option<Outcome>)> = seeds
        .par_iter()
        .map(|&s| {
            let cfg = ExperimentConfig {
                seeds: member_seeds(config.seeds.init, s),
                ..config.clone()
            };
            run_prepared(prepared, &cfg)
        })
        .collect::<Result<_>>()?;
    let mut members = Vec::with_capacity(runs.len());
    let mut params = Vec::with_capacity(runs.len());
    for (report, outcome) in runs {
        let Some(outcome) = outcome else {
            let RunStatus::Failed { diagnostic } = &report.status else {
                unreachable!("missing outcome only for failed runs")
            };
            return Err(Error::Divergence {
                step: 0,
                message: format!("ensemble member failed: {diagnostic}"),
            });
        };
        params.push(outcome.params);
        members.push(report);
    }
    let model = prepared.classifier()?;
    let batch = config.train.eval_batch;
    let voted = evaluate_voted(&model, &params, &prepared.data.test, batch)?;
    let averaged = evaluate(&model, &average_parameters(&params)?, &prepared.data.test, batch)?;
    let errors: Vec<f64> = members.iter().filter_map(RunReport::error_rate).collect();
    let mean_member_error = errors.iter().sum::<f64>() / errors.len() as f64;
    Ok(EnsembleReport {
        member_seeds: seeds.to_vec(),
        voted,
        averaged,
        mean_member_error,
        max_member_error: errors.iter().copied().fold(f64::MIN, f64::max),
        voted_reduction: relative_error_reduction(&[mean_member_error], &[voted.error]),
        averaged_reduction: relative_error_reduction(&[mean_member_error], &[averaged.error]),
        members,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum SweepAxis {
    #[serde(rename = "lambda")]
    Lambda(Vec<f64>),
    #[serde(rename = "k")]
    TeacherSize(Vec<TeacherSize>),
}

impl SweepAxis {
    /// The distillation weights suggested for a first sweep.
    pub fn default_lambda() -> Self {
        SweepAxis::Lambda(vec![0.0, 0.25, 0.5, 1.0, 1.5, 2.0])
    }

    /// Teacher sizes 1 to 5 plus the all-snapshot mean.
    pub fn default_k() -> Self {
        let mut ks: Vec<TeacherSize> = (1..=5).map(TeacherSize::Last).collect();
        ks.push(TeacherSize::All);
        SweepAxis::TeacherSize(ks)
    }

    fn cells(&self, base: &DistillConfig) -> Vec<(String, DistillConfig)> {
        match self {
            SweepAxis::Lambda(ls) => ls
                .iter()
                .map(|&l| (l.to_string(), DistillConfig { lambda: l, ..base.clone() }))
                .collect(),
            SweepAxis::TeacherSize(ks) => ks
                .iter()
                .map(|&k| (k.to_string(), DistillConfig { teacher_size: k, ..base.clone() }))
                .collect(),
        }
    }

    fn len(&self) -> usize {
        match self {
            SweepAxis::Lambda(v) => v.len(),
            SweepAxis::TeacherSize(v) => v.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellRun {
    pub seed: u64,
    pub error: Option<f64>,
    pub accuracy: Option<f64>,
    pub diagnostic: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub value: String,
    pub distill: DistillConfig,
    pub runs: Vec<CellRun>,
    /// Mean over the seeds that completed; absent when none did.
    pub mean_error: Option<f64>,
    pub mean_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub axis: SweepAxis,
    pub seeds: Vec<u64>,
    pub cells: Vec<SweepCell>,
}

/// One run per (cell, seed); `seed` sets both the initialization and the
/// data order. Failing cells are recorded and the sweep continues.
pub fn sweep(
    config: &ExperimentConfig,
    axis: &SweepAxis,
    seeds: &[u64],
) -> Result<(SweepTable, Vec<RunReport>)> {
    let prepared = prepare(config)?;
    sweep_prepared(&prepared, config, axis, seeds)
}

pub fn sweep_prepared(
    prepared: &Prepared,
    config: &ExperimentConfig,
    axis: &SweepAxis,
    seeds: &[u64],
) -> Result<(SweepTable, Vec<RunReport>)> {
    if axis.len() == 0 || seeds.is_empty() {
        return Err(Error::Config("a sweep needs a non-empty grid and seed list".into()));
    }
    if config.distill.method == Method::Baseline {
        return Err(Error::Config("sweeps vary distillation settings; pick sda or sdv".into()));
    }
    let cells = axis.cells(&config.distill);
    let jobs: Vec<(usize, u64)> = (0..cells.len())
        .flat_map(|c| seeds.iter().map(move |&s| (c, s)))
        .collect();
    let results: Vec<std::result::Result<RunReport, String>> = jobs
        .par_iter()
        .map(|&(c, s)| {
            let cfg = ExperimentConfig {
                distill: cells[c].1.clone(),
                seeds: Seeds::new(s, s),
                ..config.clone()
            };
            run_prepared(prepared, &cfg)
                .map(|(r, _)| r)
                .map_err(|e| e.to_string())
        })
        .collect();

    let mut table_cells = Vec::with_capacity(cells.len());
    let mut reports = Vec::new();
    let mut results = results.into_iter();
    for (value, distill) in cells {
        let mut runs = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let run = match results.next().expect("one result per job") {
                Ok(report) => {
                    let run = CellRun {
                        seed,
                        error: report.student.map(|m| m.error),
                        accuracy: report.student.map(|m| m.accuracy),
                        diagnostic: match &report.status {
                            RunStatus::Failed { diagnostic } => Some(diagnostic.clone()),
                            RunStatus::Completed => None,
                        },
                    };
                    reports.push(report);
                    run
                }
                Err(message) => CellRun {
                    seed,
                    error: None,
                    accuracy: None,
                    diagnostic: Some(message),
                },
            };
            runs.push(run);
        }
        let errs: Vec<f64> = runs.iter().filter_map(|r| r.error).collect();
        let accs: Vec<f64> = runs.iter().filter_map(|r| r.accuracy).collect();
        let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
        table_cells.push(SweepCell {
            value,
            distill,
            mean_error: mean(&errs),
            mean_accuracy: mean(&accs),
            runs,
        });
    }
    Ok((
        SweepTable {
            axis: axis.clone(),
            seeds: seeds.to_vec(),
            cells: table_cells,
        },
        reports,
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityResult {
    pub strategy: String,
    pub distill: DistillConfig,
    /// Final test accuracy per data-order seed, in seed order.
    pub accuracies: Vec<f64>,
    pub summary: Summary,
    /// Relative error reduction against the first strategy, seed-paired.
    pub error_reduction: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityStudy {
    pub init_seed: u64,
    pub data_seeds: Vec<u64>,
    pub results: Vec<StabilityResult>,
}

/// Baseline, SDA with one and five snapshots, and SDV with five, all with
/// distillation weight `lambda`.
pub fn default_strategies(lambda: f64) -> Vec<DistillConfig> {
    vec![
        DistillConfig::baseline(),
        DistillConfig::sda(TeacherSize::Last(1), lambda),
        DistillConfig::sda(TeacherSize::Last(5), lambda),
        DistillConfig::sdv(5, lambda),
    ]
}

/// Repeats every strategy once per data-order seed with the initialization
/// held at `init_seed`.
pub fn stability_study(
    config: &ExperimentConfig,
    strategies: &[DistillConfig],
    data_seeds: &[u64],
    init_seed: u64,
) -> Result<StabilityStudy> {
    let prepared = prepare(config)?;
    stability_prepared(&prepared, config, strategies, data_seeds, init_seed)
}

pub fn stability_prepared(
    prepared: &Prepared,
    config: &ExperimentConfig,
    strategies: &[DistillConfig],
    data_seeds: &[u64],
    init_seed: u64,
) -> Result<StabilityStudy> {
    if data_seeds.len() < 2 {
        return Err(Error::Config("a stability study needs at least two data seeds".into()));
    }
    if strategies.is_empty() {
        return Err(Error::Config("no strategies to compare".into()));
    }
    let jobs: Vec<(usize, u64)> = (0..strategies.len())
        .flat_map(|i| data_seeds.iter().map(move |&s| (i, s)))
        .collect();
    let reports: Vec<RunReport> = jobs
        .par_iter()
        .map(|&(i, s)| {
            let cfg = ExperimentConfig {
                distill: strategies[i].clone(),
                seeds: Seeds::new(init_seed, s),
                ..config.clone()
            };
            run_prepared(prepared, &cfg).map(|(r, _)| r)
        })
        .collect::<Result<_>>()?;

    let mut results: Vec<StabilityResult> = Vec::with_capacity(strategies.len());
    for (i, distill) in strategies.iter().enumerate() {
        let runs = &reports[i * data_seeds.len()..(i + 1) * data_seeds.len()];
        let accuracies = runs
            .iter()
            .map(|r| match (&r.status, r.student) {
                (RunStatus::Completed, Some(m)) => Ok(m.accuracy),
                (RunStatus::Failed { diagnostic }, _) => Err(Error::Divergence {
                    step: 0,
                    message: format!("{} (data seed {}): {diagnostic}", r.label, r.config.seeds.data),
                }),
                _ => unreachable!("completed runs carry metrics"),
            })
            .collect::<Result<Vec<f64>>>()?;
        let error_reduction = results.first().and_then(|base| {
            let be: Vec<f64> = base.accuracies.iter().map(|a| 1.0 - a).collect();
            let me: Vec<f64> = accuracies.iter().map(|a| 1.0 - a).collect();
            relative_error_reduction(&be, &me)
        });
        results.push(StabilityResult {
            strategy: distill.label(),
            distill: distill.clone(),
            summary: Summary::of(&accuracies)?,
            accuracies,
            error_reduction,
        });
    }
    Ok(StabilityStudy {
        init_seed,
        data_seeds: data_seeds.to_vec(),
        results,
    })
}
