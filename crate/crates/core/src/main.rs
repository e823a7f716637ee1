use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use selfdistill::data::{make_synthetic, CsvSchema, SyntheticSpec};
use selfdistill::distill::{DistillConfig, EvalPolicy, Method, Seeds, TeacherSize};
use selfdistill::harness::{
    default_strategies, emit_report, ensemble_experiment, prepare, read_report, run_prepared,
    stability_study, sweep, DataSource, ExperimentConfig, Report, RunStatus, SweepAxis,
};
use selfdistill::Error;

/// Fine-tune a small transformer classifier with self-ensemble and
/// self-distillation. Every flag can also be set through an environment
/// variable named SELFDISTILL_<FLAG> (e.g. SELFDISTILL_LAMBDA=1.5).
#[derive(Parser, Debug)]
#[command(name = "selfdistill", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fine-tune one model and write its report.
    Train {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Repeat a run over a grid of distillation weights or teacher sizes.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_enum, default_value = "lambda", env = "SELFDISTILL_AXIS")]
        axis: Axis,
        /// Comma-separated grid values; defaults depend on the axis.
        #[arg(long, env = "SELFDISTILL_GRID")]
        grid: Option<String>,
        /// Comma-separated run seeds (initialization and data order).
        #[arg(long, default_value = "0,1,2", env = "SELFDISTILL_SEEDS")]
        seeds: String,
    },
    /// Fine-tune several members and evaluate their vote and parameter mean.
    Ensemble {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value_t = 4, env = "SELFDISTILL_N_MODELS")]
        n_models: usize,
        /// Comma-separated member seeds; defaults to 1..=n-models.
        #[arg(long, env = "SELFDISTILL_SEEDS")]
        seeds: Option<String>,
    },
    /// Compare strategies over data orders with the initialization fixed.
    Stability {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value = "0,1,2,3,4,5,6,7,8,9", env = "SELFDISTILL_DATA_SEEDS")]
        data_seeds: String,
        /// Defaults to --seed.
        #[arg(long, env = "SELFDISTILL_INIT_SEED")]
        init_seed: Option<u64>,
    },
    /// Print summary tables for stored reports.
    Report {
        /// report.json files or directories holding one.
        #[arg(required = true)]
        paths: Vec<PathBuf>,
    },
    /// Write a synthetic corpus as label<TAB>text files.
    Synth {
        /// TOML file with synthetic-data settings; defaults otherwise.
        #[arg(long, env = "SELFDISTILL_SPEC")]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 0, env = "SELFDISTILL_SYNTHETIC_SEED")]
        seed: u64,
        #[arg(long, env = "SELFDISTILL_OUT")]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Axis {
    Lambda,
    K,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Policy {
    Final,
    BestDev,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[arg(long, default_value = "baseline", env = "SELFDISTILL_MODE")]
    mode: Method,
    #[arg(long, default_value_t = 1.0, env = "SELFDISTILL_LAMBDA")]
    lambda: f64,
    /// Snapshots in the teacher: a positive integer or `all`.
    #[arg(long, default_value = "1", env = "SELFDISTILL_TEACHER_SIZE")]
    teacher_size: TeacherSize,
    #[arg(long, default_value_t = 1, env = "SELFDISTILL_SNAPSHOT_EVERY")]
    snapshot_every: usize,

    /// Initialization seed.
    #[arg(long, default_value_t = 0, env = "SELFDISTILL_SEED")]
    seed: u64,
    /// Data-order seed; defaults to --seed.
    #[arg(long, env = "SELFDISTILL_DATA_SEED")]
    data_seed: Option<u64>,
    /// Separate seed for the classifier head.
    #[arg(long, env = "SELFDISTILL_HEAD_SEED")]
    head_seed: Option<u64>,

    /// `synthetic`, `synthetic:<spec.toml>`, or a training CSV file.
    #[arg(long, default_value = "synthetic", env = "SELFDISTILL_DATASET")]
    dataset: String,
    #[arg(long, default_value_t = 0, env = "SELFDISTILL_SYNTHETIC_SEED")]
    synthetic_seed: u64,
    /// Test CSV (required with a CSV dataset).
    #[arg(long, env = "SELFDISTILL_TEST")]
    test: Option<PathBuf>,
    /// Optional dev CSV.
    #[arg(long, env = "SELFDISTILL_DEV")]
    dev: Option<PathBuf>,
    #[arg(long, default_value_t = 0, env = "SELFDISTILL_LABEL_COLUMN")]
    label_column: usize,
    #[arg(long, default_value = "1", env = "SELFDISTILL_TEXT_COLUMNS")]
    text_columns: String,
    /// Columns of a second segment, for sentence pairs.
    #[arg(long, env = "SELFDISTILL_PAIR_COLUMNS")]
    pair_columns: Option<String>,
    #[arg(long, env = "SELFDISTILL_N_CLASSES")]
    n_classes: Option<usize>,
    /// Value of the first label in the file (0 or 1 typically).
    #[arg(long, default_value_t = 0, env = "SELFDISTILL_LABEL_BASE")]
    label_base: i64,
    #[arg(long, default_value_t = ',', env = "SELFDISTILL_DELIMITER")]
    delimiter: char,
    #[arg(long, env = "SELFDISTILL_HAS_HEADER")]
    has_header: bool,

    #[arg(long, default_value_t = 4, env = "SELFDISTILL_EPOCHS")]
    epochs: usize,
    #[arg(long, default_value_t = 8, env = "SELFDISTILL_MICRO_BATCH")]
    micro_batch: usize,
    #[arg(long, default_value_t = 2, env = "SELFDISTILL_ACCUM_STEPS")]
    accum_steps: usize,
    #[arg(long, default_value_t = 64, env = "SELFDISTILL_EVAL_BATCH")]
    eval_batch: usize,
    #[arg(long, env = "SELFDISTILL_ENCODER_LR")]
    encoder_lr: Option<f64>,
    #[arg(long, env = "SELFDISTILL_HEAD_LR")]
    head_lr: Option<f64>,
    #[arg(long, env = "SELFDISTILL_WARMUP_PROP")]
    warmup_prop: Option<f64>,
    #[arg(long, env = "SELFDISTILL_WEIGHT_DECAY")]
    weight_decay: Option<f64>,
    #[arg(long, value_enum, default_value = "final", env = "SELFDISTILL_EVAL_POLICY")]
    eval_policy: Policy,

    #[arg(long, env = "SELFDISTILL_DIM")]
    dim: Option<usize>,
    #[arg(long, env = "SELFDISTILL_LAYERS")]
    layers: Option<usize>,
    #[arg(long, env = "SELFDISTILL_HEADS")]
    heads: Option<usize>,
    #[arg(long, env = "SELFDISTILL_FFN_DIM")]
    ffn_dim: Option<usize>,
    #[arg(long, env = "SELFDISTILL_MAX_LEN")]
    max_len: Option<usize>,
    #[arg(long, env = "SELFDISTILL_DROPOUT")]
    dropout: Option<f64>,
    #[arg(long, env = "SELFDISTILL_INIT_STD")]
    init_std: Option<f64>,
    #[arg(long, default_value_t = 2000, env = "SELFDISTILL_VOCAB_SIZE")]
    vocab_size: usize,
    #[arg(long, default_value_t = 1, env = "SELFDISTILL_MIN_FREQ")]
    min_freq: usize,

    /// Record wall-clock time (reports then differ between reruns).
    #[arg(long, env = "SELFDISTILL_TIMING")]
    timing: bool,
    /// Save parameters and teacher snapshots after every epoch.
    #[arg(long, env = "SELFDISTILL_CHECKPOINTS")]
    checkpoints: bool,
    /// Output directory.
    #[arg(long, env = "SELFDISTILL_OUT")]
    out: PathBuf,
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> anyhow::Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    s.split(',')
        .map(str::trim)
        .filter(|v| !v.is_empty())
        .map(|v| {
            v.parse::<T>()
                .map_err(|e| Error::Config(format!("bad {what} `{v}`: {e}")).into())
        })
        .collect()
}

fn read_spec(path: &Path) -> anyhow::Result<SyntheticSpec> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Io { path: path.into(), source: e })?;
    toml::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())).into())
}

impl RunArgs {
    fn data_source(&self) -> anyhow::Result<DataSource> {
        if self.dataset == "synthetic" {
            return Ok(DataSource::Synthetic {
                spec: SyntheticSpec::default(),
                seed: self.synthetic_seed,
            });
        }
        if let Some(path) = self.dataset.strip_prefix("synthetic:") {
            return Ok(DataSource::Synthetic {
                spec: read_spec(Path::new(path))?,
                seed: self.synthetic_seed,
            });
        }
        let Some(test) = self.test.clone() else {
            bail!(Error::Config("a CSV dataset needs --test".into()));
        };
        let Some(n_classes) = self.n_classes else {
            bail!(Error::Config("a CSV dataset needs --n-classes".into()));
        };
        let mut schema = CsvSchema::new(
            self.label_column,
            parse_list(&self.text_columns, "text column")?,
            n_classes,
        );
        if let Some(p) = &self.pair_columns {
            schema.pair_columns = parse_list(p, "pair column")?;
        }
        schema.label_base = self.label_base;
        schema.delimiter = self.delimiter;
        schema.has_header = self.has_header;
        Ok(DataSource::Csv {
            train: PathBuf::from(&self.dataset),
            test,
            dev: self.dev.clone(),
            schema,
        })
    }

    fn config(&self) -> anyhow::Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig {
            data: self.data_source()?,
            ..ExperimentConfig::default()
        };
        cfg.vocab.max_size = self.vocab_size;
        cfg.vocab.min_freq = self.min_freq;

        let m = &mut cfg.model;
        m.dim = self.dim.unwrap_or(m.dim);
        m.n_layers = self.layers.unwrap_or(m.n_layers);
        m.n_heads = self.heads.unwrap_or(m.n_heads);
        m.ffn_dim = self.ffn_dim.unwrap_or(m.ffn_dim);
        m.max_len = self.max_len.unwrap_or(m.max_len);
        m.dropout_p = self.dropout.unwrap_or(m.dropout_p);
        m.init_std = self.init_std.unwrap_or(m.init_std);

        cfg.distill = DistillConfig {
            method: self.mode,
            lambda: self.lambda,
            teacher_size: self.teacher_size,
            snapshot_every: self.snapshot_every,
        };
        cfg.distill.validate()?;

        let t = &mut cfg.train;
        t.epochs = self.epochs;
        t.micro_batch = self.micro_batch;
        t.accum_steps = self.accum_steps;
        t.eval_batch = self.eval_batch;
        t.eval_policy = match self.eval_policy {
            Policy::Final => EvalPolicy::Final,
            Policy::BestDev => EvalPolicy::BestDev,
        };
        let o = &mut t.optim;
        o.encoder_lr = self.encoder_lr.unwrap_or(o.encoder_lr);
        o.head_lr = self.head_lr.unwrap_or(o.head_lr);
        o.warmup_prop = self.warmup_prop.unwrap_or(o.warmup_prop);
        o.weight_decay = self.weight_decay.unwrap_or(o.weight_decay);
        if self.checkpoints {
            t.checkpoint_dir = Some(self.out.join("checkpoints"));
        }
        t.validate()?;

        cfg.seeds = Seeds {
            init: self.seed,
            data: self.data_seed.unwrap_or(self.seed),
            head: self.head_seed,
        };
        cfg.timing = self.timing;
        Ok(cfg)
    }
}

fn emit(report: &Report, out: &Path) -> anyhow::Result<()> {
    let written = emit_report(report, out)?;
    log::info!("wrote {} files under {}", written.len(), out.display());
    print!("{}", report.summary());
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train { run } => {
            let cfg = run.config()?;
            let prepared = prepare(&cfg)?;
            let (report, outcome) = run_prepared(&prepared, &cfg)?;
            if let Some(o) = &outcome {
                std::fs::create_dir_all(&run.out)
                    .with_context(|| format!("creating {}", run.out.display()))?;
                o.params.save(&run.out.join("student.ckpt"))?;
                if let Some(t) = &o.teacher {
                    t.save(&run.out.join("teacher.ckpt"))?;
                }
            }
            let failed = match &report.status {
                RunStatus::Failed { diagnostic } => Some(diagnostic.clone()),
                RunStatus::Completed => None,
            };
            emit(&Report::Run(report), &run.out)?;
            if let Some(d) = failed {
                bail!(Error::Divergence { step: 0, message: d });
            }
        }
        Command::Sweep { run, axis, grid, seeds } => {
            let cfg = run.config()?;
            let axis = match (axis, grid) {
                (Axis::Lambda, None) => SweepAxis::default_lambda(),
                (Axis::K, None) => SweepAxis::default_k(),
                (Axis::Lambda, Some(g)) => SweepAxis::Lambda(parse_list(&g, "lambda")?),
                (Axis::K, Some(g)) => SweepAxis::TeacherSize(parse_list(&g, "teacher size")?),
            };
            let seeds = parse_list(&seeds, "seed")?;
            let (table, _) = sweep(&cfg, &axis, &seeds)?;
            emit(&Report::Sweep(table), &run.out)?;
        }
        Command::Ensemble { run, n_models, seeds } => {
            let cfg = run.config()?;
            let seeds: Vec<u64> = match seeds {
                Some(s) => parse_list(&s, "seed")?,
                None => (1..=n_models as u64).collect(),
            };
            if seeds.len() != n_models {
                bail!(Error::Config(format!(
                    "{} seeds given for {n_models} models",
                    seeds.len()
                )));
            }
            let report = ensemble_experiment(&cfg, &seeds)?;
            emit(&Report::Ensemble(report), &run.out)?;
        }
        Command::Stability { run, data_seeds, init_seed } => {
            let cfg = run.config()?;
            let seeds = parse_list(&data_seeds, "data seed")?;
            let study = stability_study(
                &cfg,
                &default_strategies(run.lambda),
                &seeds,
                init_seed.unwrap_or(run.seed),
            )?;
            emit(&Report::Stability(study), &run.out)?;
        }
        Command::Report { paths } => {
            for p in paths {
                let report = read_report(&p)?;
                println!("== {}", p.display());
                print!("{}", report.summary());
            }
        }
        Command::Synth { spec, seed, out } => {
            let spec = match spec {
                Some(p) => read_spec(&p)?,
                None => SyntheticSpec::default(),
            };
            let data = make_synthetic(&spec, seed)?;
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            data.train.write_tsv(&out.join("train.tsv"))?;
            data.test.write_tsv(&out.join("test.tsv"))?;
            println!("wrote {} train and {} test examples to {}", data.train.len(), data.test.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SELFDISTILL_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let config = e
                .downcast_ref::<Error>()
                .is_some_and(|e| e.is_config());
            ExitCode::from(if config { 1 } else { 2 })
        }
    }
}
