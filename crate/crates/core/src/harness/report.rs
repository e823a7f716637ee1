//! Report files: one pretty-printed JSON document per experiment plus flat
//! CSV curves for plotting.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{EnsembleReport, RunReport, StabilityStudy, SweepTable};
use crate::error::{Error, Result};

pub const REPORT_FILE: &str = "report.json";

// Built once per command and written straight out; boxing buys nothing.
#[allow(clippy::large_enum_variant)]
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Report {
    Run(RunReport),
    Sweep(SweepTable),
    Ensemble(EnsembleReport),
    Stability(StabilityStudy),
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn write_csv(path: &Path, header: &[&str], rows: Vec<Vec<String>>) -> Result<()> {
    let map = |e: csv::Error| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Input(format!("{}: {other:?}", path.display())),
    };
    let mut w = csv::Writer::from_path(path).map_err(map)?;
    w.write_record(header).map_err(map)?;
    for r in rows {
        w.write_record(&r).map_err(map)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_curves(dir: &Path, prefix: &str, run: &RunReport, written: &mut Vec<PathBuf>) -> Result<()> {
    let curve = dir.join(format!("{prefix}curve.csv"));
    write_csv(
        &curve,
        &[
            "epoch",
            "test_error",
            "test_accuracy",
            "ce",
            "mse",
            "lr",
            "dev_accuracy",
            "teacher_test_error",
        ],
        run.curve
            .iter()
            .map(|p| {
                vec![
                    p.epoch.to_string(),
                    p.test_error.to_string(),
                    p.test_accuracy.to_string(),
                    p.ce.to_string(),
                    opt(p.mse),
                    p.lr.to_string(),
                    opt(p.dev_accuracy),
                    opt(p.teacher_test_error),
                ]
            })
            .collect(),
    )?;
    written.push(curve);
    let steps = dir.join(format!("{prefix}steps.csv"));
    write_csv(
        &steps,
        &["step", "epoch", "loss", "ce", "mse", "lr"],
        run.steps
            .iter()
            .map(|s| {
                vec![
                    s.step.to_string(),
                    s.epoch.to_string(),
                    s.loss.to_string(),
                    s.ce.to_string(),
                    opt(s.mse),
                    s.lr.to_string(),
                ]
            })
            .collect(),
    )?;
    written.push(steps);
    Ok(())
}

/// Writes `report.json` and the flat CSV files for `report` into `dir`,
/// returning every path written.
pub fn emit_report(report: &Report, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let json_path = dir.join(REPORT_FILE);
    let mut json = serde_json::to_string_pretty(report)
        .map_err(|e| Error::Input(format!("cannot serialize report: {e}")))?;
    json.push('\n');
    fs::write(&json_path, json).map_err(|e| Error::io(&json_path, e))?;
    let mut written = vec![json_path];

    match report {
        Report::Run(run) => write_curves(dir, "", run, &mut written)?,
        Report::Ensemble(ens) => {
            for (i, m) in ens.members.iter().enumerate() {
                write_curves(dir, &format!("member{i}-"), m, &mut written)?;
            }
        }
        Report::Sweep(table) => {
            let path = dir.join("sweep.csv");
            let rows = table
                .cells
                .iter()
                .flat_map(|c| {
                    c.runs.iter().map(|r| {
                        vec![
                            c.value.clone(),
                            r.seed.to_string(),
                            opt(r.error),
                            opt(r.accuracy),
                            r.diagnostic.clone().unwrap_or_default(),
                        ]
                    })
                })
                .collect();
            write_csv(&path, &["value", "seed", "error", "accuracy", "diagnostic"], rows)?;
            written.push(path);
        }
        Report::Stability(study) => {
            let path = dir.join("stability.csv");
            let rows = study
                .results
                .iter()
                .flat_map(|r| {
                    study.data_seeds.iter().zip(&r.accuracies).map(|(s, a)| {
                        vec![r.strategy.clone(), s.to_string(), a.to_string()]
                    })
                })
                .collect();
            write_csv(&path, &["strategy", "data_seed", "accuracy"], rows)?;
            written.push(path);
        }
    }
    Ok(written)
}

/// Reads a report from a `report.json` file or a directory holding one.
pub fn read_report(path: &Path) -> Result<Report> {
    let file = if path.is_dir() {
        path.join(REPORT_FILE)
    } else {
        path.to_path_buf()
    };
    let text = fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: file,
        line: e.line() as u64,
        message: e.to_string(),
    })
}

fn pct(x: f64) -> String {
    format!("{:.2}%", 100.0 * x)
}

impl Report {
    /// Plain-text table for terminals.
    pub fn summary(&self) -> String {
        let mut s = String::new();
        match self {
            Report::Run(r) => {
                let _ = writeln!(s, "run {}  (steps {}, epoch {})", r.label, r.total_steps, r.selected_epoch);
                match (&r.status, r.student) {
                    (super::RunStatus::Failed { diagnostic }, _) => {
                        let _ = writeln!(s, "  FAILED: {diagnostic}");
                    }
                    (_, Some(m)) => {
                        let _ = writeln!(s, "  student  error {}  accuracy {}", pct(m.error), pct(m.accuracy));
                    }
                    _ => {}
                }
                if let Some(t) = r.teacher {
                    let _ = writeln!(s, "  teacher  error {}  accuracy {}", pct(t.error), pct(t.accuracy));
                }
                let _ = writeln!(s, "  epoch  test_error  ce        mse");
                for p in &r.curve {
                    let _ = writeln!(
                        s,
                        "  {:>5}  {:>10}  {:<8.5}  {}",
                        p.epoch,
                        pct(p.test_error),
                        p.ce,
                        p.mse.map(|m| format!("{m:.5}")).unwrap_or_else(|| "-".into())
                    );
                }
            }
            Report::Ensemble(e) => {
                let _ = writeln!(s, "ensemble of {} members", e.members.len());
                for (seed, m) in e.member_seeds.iter().zip(&e.members) {
                    let err = m.error_rate().map(pct).unwrap_or_else(|| "failed".into());
                    let _ = writeln!(s, "  member seed {seed:<6} error {err}");
                }
                let _ = writeln!(s, "  voted     error {}", pct(e.voted.error));
                let _ = writeln!(s, "  averaged  error {}", pct(e.averaged.error));
                if let Some(d) = e.voted_reduction {
                    let _ = writeln!(s, "  voted relative error reduction {}", pct(d));
                }
            }
            Report::Sweep(t) => {
                let axis = match t.axis {
                    super::SweepAxis::Lambda(_) => "lambda",
                    super::SweepAxis::TeacherSize(_) => "k",
                };
                let _ = writeln!(s, "sweep over {axis}, seeds {:?}", t.seeds);
                for c in &t.cells {
                    let failed = c.runs.iter().filter(|r| r.error.is_none()).count();
                    let mean = c.mean_error.map(pct).unwrap_or_else(|| "-".into());
                    let _ = write!(s, "  {axis}={:<6} mean error {mean}", c.value);
                    if failed > 0 {
                        let _ = write!(s, "  ({failed} failed)");
                    }
                    s.push('\n');
                }
            }
            Report::Stability(st) => {
                let _ = writeln!(
                    s,
                    "stability over {} data orders (init seed {})",
                    st.data_seeds.len(),
                    st.init_seed
                );
                let _ = writeln!(s, "  strategy                   mean      std       min       median    max");
                for r in &st.results {
                    let m = &r.summary;
                    let _ = writeln!(
                        s,
                        "  {:<26} {:<9.4} {:<9.4} {:<9.4} {:<9.4} {:.4}",
                        r.strategy, m.mean, m.std, m.min, m.median, m.max
                    );
                }
            }
        }
        s
    }
}
