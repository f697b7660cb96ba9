use std::path::Path;
use std::process::{Command, Output};

use blockwatch_cli::commands::{EvalReport, TrainSummary};
use blockwatch_core::dataset::GenerationReport;
use blockwatch_core::pipeline::LearningCurve;
use sha2::{Digest, Sha256};

fn blockwatch(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_blockwatch")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// A small run config writing into `dir`.
fn small_config(dir: &Path, episodes: usize) -> String {
    let path = dir.join("run.toml");
    let text = format!(
        "[dataset]\nepisodes = {episodes}\n\n[train]\nepochs = 2\neval_every = 5\n\n[paths]\nout = \"{}\"\n",
        dir.join("out").display()
    );
    std::fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

fn sha256(path: &Path) -> String {
    hex::encode(Sha256::digest(std::fs::read(path).unwrap()))
}

#[test]
fn generate_reports_the_episode_split_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), 10);
    let first = blockwatch(&["generate", "--config", &cfg]);
    assert_eq!(code(&first), 0, "{}", stderr(&first));
    assert!(String::from_utf8_lossy(&first.stdout).contains("train 7 / validation 3"));
    let out = dir.path().join("out");
    let report: GenerationReport =
        serde_json::from_str(&std::fs::read_to_string(out.join("generation.json")).unwrap()).unwrap();
    assert_eq!((report.episodes_train, report.episodes_validation), (7, 3));
    let hashes = [sha256(&out.join("train.bwds")), sha256(&out.join("val.bwds"))];

    let again = blockwatch(&["generate", "--config", &cfg, "--workers", "1"]);
    assert_eq!(code(&again), 0);
    assert_eq!([sha256(&out.join("train.bwds")), sha256(&out.join("val.bwds"))], hashes);

    let reseeded = blockwatch(&["generate", "--config", &cfg, "--seed", "43"]);
    assert_eq!(code(&reseeded), 0);
    assert_ne!(sha256(&out.join("train.bwds")), hashes[0]);
}

#[test]
fn closed_stdout_is_not_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), 4);
    let mut child = Command::new(env!("CARGO_BIN_EXE_blockwatch"))
        .args(["generate", "--config", &cfg])
        .stdout(std::process::Stdio::piped())
        .stderr(std::process::Stdio::piped())
        .spawn()
        .unwrap();
    drop(child.stdout.take());
    let o = child.wait_with_output().unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

#[test]
fn zero_episodes_is_a_config_error_and_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), 0);
    let o = blockwatch(&["generate", "--config", &cfg]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("dataset.episodes"), "{}", stderr(&o));
    assert!(!dir.path().join("out").exists());
}

#[test]
fn malformed_config_points_at_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, "[dataset]\nepisodes = 10\nsplit_ratio = \"most\"\n").unwrap();
    let o = blockwatch(&["generate", "--config", path.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("line 3"), "{}", stderr(&o));
}

#[test]
fn unknown_model_lists_the_choices() {
    let o = blockwatch(&["train", "--model", "resnet"]);
    assert_eq!(code(&o), 2);
    let err = stderr(&o);
    assert!(err.contains("vision") && err.contains("baseline"), "{err}");
}

#[test]
fn training_without_data_suggests_generate() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), 10);
    let o = blockwatch(&["train", "--config", &cfg, "--model", "baseline"]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("blockwatch generate"), "{}", stderr(&o));
}

#[test]
fn train_eval_report_round() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), 12);
    let out = dir.path().join("out");
    assert_eq!(code(&blockwatch(&["generate", "--config", &cfg])), 0);

    for model in ["baseline", "vision"] {
        let o = blockwatch(&["train", "--config", &cfg, "--model", model, "--epochs", "1"]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let curve = LearningCurve::read_csv(&out.join(format!("{model}_curve.csv"))).unwrap();
        assert!(!curve.points.is_empty());
        assert!(curve.points.windows(2).all(|w| w[0].iteration < w[1].iteration));
        let summary: TrainSummary =
            serde_json::from_str(&std::fs::read_to_string(out.join(format!("{model}_metrics.json"))).unwrap()).unwrap();
        assert_eq!(summary.model.name(), model);
    }

    let o = blockwatch(&["eval", "--config", &cfg, "--model", "baseline"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let r: EvalReport = serde_json::from_slice(&o.stdout).unwrap();
    let m = r.metrics;
    let total = (m.tp + m.fp + m.tn + m.fn_) as f64;
    assert!((m.top1 - (m.tp + m.tn) as f64 / total).abs() < 1e-12);
    assert_eq!(r.by_scenario.len(), 1);
    assert_eq!(r.by_scenario["street"], m);

    let train_split = out.join("train.bwds");
    let o = blockwatch(&["eval", "--config", &cfg, "--dataset", train_split.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    let o = blockwatch(&["report", "--config", &cfg]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("delta"));
    assert!(out.join("comparison.csv").exists());

    let ck = out.join("vision.bwck");
    let bytes = std::fs::read(&ck).unwrap();
    std::fs::write(&ck, &bytes[..bytes.len() / 2]).unwrap();
    let o = blockwatch(&["eval", "--config", &cfg, "--model", "vision"]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("truncated"), "{}", stderr(&o));
}

#[test]
fn report_without_curves_names_the_missing_training() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), 10);
    let o = blockwatch(&["report", "--config", &cfg]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("train --model vision"), "{}", stderr(&o));
}

#[test]
fn selftest_passes_and_catches_a_broken_gru() {
    let start = std::time::Instant::now();
    let o = blockwatch(&["selftest"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    assert!(start.elapsed().as_secs() < 60);

    let o = blockwatch(&["selftest", "--perturb-gru", "0.05"]);
    assert_eq!(code(&o), 4);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.lines().any(|l| l.starts_with("FAIL gru_cell gradient")), "{stdout}");
    assert!(stderr(&o).contains("gru_cell gradient"));
}

#[test]
fn shipped_default_config_matches_the_built_in_defaults() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.toml");
    let cfg = blockwatch_cli::config::RunConfig::load(&path).unwrap();
    assert_eq!(cfg, blockwatch_cli::config::RunConfig::default());
}
