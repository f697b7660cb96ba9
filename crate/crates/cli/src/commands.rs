//! The five subcommands as plain functions returning structured results;
//! `main` only parses flags, prints and maps errors to exit codes.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use blockwatch_core::checkpoint::{load_checkpoint, save_checkpoint};
use blockwatch_core::dataset::{generate as generate_datasets, read_dataset, write_dataset, Dataset, GenerationReport};
use blockwatch_core::model::ModelKind;
use blockwatch_core::pipeline::{breakdown, compare, evaluate, train as train_model, Comparison, LearningCurve, Metrics};
use blockwatch_core::ErrorKind;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checks::{self, Check};
use crate::config::RunConfig;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] blockwatch_core::Error),

    #[error("no {what} dataset at {path}; run `blockwatch generate` with the same config first")]
    MissingDataset { what: &'static str, path: PathBuf },

    #[error("no {kind} learning curve at {path}; run `blockwatch train --model {kind}` first")]
    MissingCurve { kind: &'static str, path: PathBuf },

    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },

    #[error("self-test failed: {}", failed.join(", "))]
    ChecksFailed { failed: Vec<&'static str> },
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(match self {
            CliError::Core(e) => match e.kind() {
                ErrorKind::Config => 2,
                ErrorKind::Data => 3,
                ErrorKind::Internal => 4,
            },
            CliError::MissingDataset { .. } | CliError::MissingCurve { .. } | CliError::Io { .. } => 3,
            CliError::ChecksFailed { .. } => 4,
        })
    }
}

pub type CliResult<T> = Result<T, CliError>;

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_path_buf(), source }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    fs::write(path, text + "\n").map_err(io(path))
}

pub fn generation_report_path(cfg: &RunConfig) -> PathBuf {
    cfg.paths.out.join("generation.json")
}

/// Generation report plus where the files went.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateSummary {
    pub report: GenerationReport,
    pub train_path: PathBuf,
    pub val_path: PathBuf,
}

/// Simulates the configured episodes and writes both splits. Nothing is
/// written unless generation succeeds.
pub fn generate(cfg: &RunConfig, workers: usize) -> CliResult<GenerateSummary> {
    cfg.validate()?;
    let (train, val, report) = generate_datasets(&cfg.scenario, &cfg.wireless, &cfg.dataset, workers)?;
    fs::create_dir_all(&cfg.paths.out).map_err(io(&cfg.paths.out))?;
    write_dataset(&train, &cfg.train_path())?;
    write_dataset(&val, &cfg.val_path())?;
    write_json(&generation_report_path(cfg), &report)?;
    Ok(GenerateSummary { report, train_path: cfg.train_path(), val_path: cfg.val_path() })
}

fn load_split(path: &Path, what: &'static str) -> CliResult<Dataset> {
    if !path.exists() {
        return Err(CliError::MissingDataset { what, path: path.to_path_buf() });
    }
    Ok(read_dataset(path)?)
}

/// Metrics of the selected checkpoint on both splits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub model: ModelKind,
    pub selected_iteration: u64,
    pub iterations: u64,
    pub train: Metrics,
    pub validation: Metrics,
    pub checkpoint: PathBuf,
    pub curve: PathBuf,
    pub losses: PathBuf,
    pub seconds: f64,
}

pub fn metrics_path(cfg: &RunConfig, kind: ModelKind) -> PathBuf {
    cfg.paths.out.join(format!("{}_metrics.json", kind.name()))
}

pub fn losses_path(cfg: &RunConfig, kind: ModelKind) -> PathBuf {
    cfg.paths.out.join(format!("{}_losses.csv", kind.name()))
}

/// One `iteration,loss` row per optimizer step, counting from 1.
fn write_losses(path: &Path, losses: &[f32]) -> CliResult<()> {
    let mut text = String::from("iteration,loss\n");
    for (i, l) in losses.iter().enumerate() {
        text.push_str(&format!("{},{l}\n", i + 1));
    }
    fs::write(path, text).map_err(io(path))
}

/// Reads a file written by [`write_losses`].
pub fn read_losses(path: &Path) -> CliResult<Vec<f32>> {
    let text = fs::read_to_string(path).map_err(io(path))?;
    text.lines()
        .skip(1)
        .map(|line| {
            line.split_once(',').and_then(|(_, l)| l.parse().ok()).ok_or_else(|| {
                CliError::Core(blockwatch_core::Error::Malformed { path: path.to_path_buf(), detail: format!("bad row `{line}`") })
            })
        })
        .collect()
}

/// Trains one model on the generated splits and writes its best checkpoint,
/// learning curve and metrics.
pub fn train(cfg: &RunConfig, kind: ModelKind) -> CliResult<TrainSummary> {
    cfg.validate()?;
    let train_ds = load_split(&cfg.train_path(), "training")?;
    let val_ds = load_split(&cfg.val_path(), "validation")?;
    let start = Instant::now();
    let outcome = train_model(&cfg.model_config(kind), &train_ds, &val_ds, &cfg.train_config())?;
    let seconds = start.elapsed().as_secs_f64();
    let best = &outcome.best;
    let summary = TrainSummary {
        model: kind,
        selected_iteration: best.info.iteration,
        iterations: outcome.losses.len() as u64,
        train: evaluate(best, &train_ds)?,
        validation: evaluate(best, &val_ds)?,
        checkpoint: cfg.checkpoint_path(kind),
        curve: cfg.curve_path(kind),
        losses: losses_path(cfg, kind),
        seconds,
    };
    save_checkpoint(best, &summary.checkpoint)?;
    outcome.curve.write_csv(&summary.curve)?;
    write_losses(&summary.losses, &outcome.losses)?;
    write_json(&metrics_path(cfg, kind), &summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub checkpoint: PathBuf,
    pub dataset: PathBuf,
    pub metrics: Metrics,
    pub by_scenario: BTreeMap<String, Metrics>,
}

pub fn eval(checkpoint: &Path, dataset: &Path) -> CliResult<EvalReport> {
    let ck = load_checkpoint(checkpoint)?;
    let ds = load_split(dataset, "evaluation")?;
    Ok(EvalReport {
        checkpoint: checkpoint.to_path_buf(),
        dataset: dataset.to_path_buf(),
        metrics: evaluate(&ck, &ds)?,
        by_scenario: breakdown(&ck, &ds)?,
    })
}

pub fn comparison_path(cfg: &RunConfig) -> PathBuf {
    cfg.paths.out.join("comparison.csv")
}

pub fn summary_path(cfg: &RunConfig) -> PathBuf {
    cfg.paths.out.join("summary.txt")
}

fn load_curve(cfg: &RunConfig, kind: ModelKind) -> CliResult<LearningCurve> {
    let path = cfg.curve_path(kind);
    if !path.exists() {
        return Err(CliError::MissingCurve { kind: kind.name(), path });
    }
    Ok(LearningCurve::read_csv(&path)?)
}

/// Compares the two learning curves and writes the per-iteration delta
/// series plus a plain-text summary.
pub fn report(cfg: &RunConfig) -> CliResult<Comparison> {
    let vision = load_curve(cfg, ModelKind::Vision)?;
    let baseline = load_curve(cfg, ModelKind::Baseline)?;
    let cmp = compare(&vision, &baseline)?;
    cmp.write_csv(&comparison_path(cfg))?;
    let mut text = String::new();
    text.push_str(&format!("final validation top-1, vision:   {:.4}\n", cmp.vision_final));
    text.push_str(&format!("final validation top-1, baseline: {:.4}\n", cmp.baseline_final));
    text.push_str(&format!("delta (vision - baseline):        {:+.4}\n", cmp.delta_final));
    if let (Some(lo), Some(hi)) = (
        cmp.series.iter().map(|r| r.delta).reduce(f64::min),
        cmp.series.iter().map(|r| r.delta).reduce(f64::max),
    ) {
        text.push_str(&format!("delta range over {} shared points: {lo:+.4} .. {hi:+.4}\n", cmp.series.len()));
    }
    let path = summary_path(cfg);
    fs::write(&path, text).map_err(io(&path))?;
    Ok(cmp)
}

pub struct SelftestOutcome {
    pub checks: Vec<Check>,
    pub elapsed: Duration,
}

impl SelftestOutcome {
    pub fn failed(&self) -> Vec<&'static str> {
        self.checks.iter().filter(|c| !c.passed).map(|c| c.name).collect()
    }

    pub fn into_result(self) -> CliResult<Self> {
        let failed = self.failed();
        if failed.is_empty() {
            Ok(self)
        } else {
            Err(CliError::ChecksFailed { failed })
        }
    }
}

pub fn selftest(perturb_gru: Option<f64>) -> SelftestOutcome {
    let start = Instant::now();
    let checks = checks::selftest(perturb_gru);
    SelftestOutcome { checks, elapsed: start.elapsed() }
}

/// Fixed-width table of the headline scores.
pub fn metrics_table(rows: &[(&str, &Metrics)]) -> String {
    let mut s = format!("{:<12} {:>8} {:>10} {:>8} {:>8}   tp/fp/tn/fn\n", "split", "top-1", "precision", "recall", "f1");
    for (name, m) in rows {
        s.push_str(&format!(
            "{:<12} {:>8.4} {:>10.4} {:>8.4} {:>8.4}   {}/{}/{}/{}\n",
            name, m.top1, m.precision, m.recall, m.f1, m.tp, m.fp, m.tn, m.fn_
        ));
    }
    s
}
