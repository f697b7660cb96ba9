use std::fmt::Write as _;
use std::io::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

use blockwatch_cli::commands::{self, metrics_table, CliError, CliResult};
use blockwatch_cli::config::RunConfig;
use blockwatch_core::model::ModelKind;
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(
    name = "blockwatch",
    version,
    about = "Vision-aided mmWave link-blockage prediction on synthetic street scenes"
)]
struct Cli {
    /// Run configuration (TOML). Built-in defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides both the dataset and the training seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the number of training epochs.
    #[arg(long, global = true)]
    epochs: Option<usize>,
    /// Overrides the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Generation threads; 0 uses every core.
    #[arg(long, global = true, default_value_t = 0)]
    workers: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    Vision,
    Baseline,
}

impl From<ModelArg> for ModelKind {
    fn from(m: ModelArg) -> Self {
        match m {
            ModelArg::Vision => ModelKind::Vision,
            ModelArg::Baseline => ModelKind::Baseline,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Simulate episodes and write the training and validation datasets.
    Generate,
    /// Train one model on the generated datasets.
    Train {
        #[arg(long, value_enum)]
        model: ModelArg,
    },
    /// Score a checkpoint on a dataset and print the metrics as JSON.
    Eval {
        /// Defaults to the checkpoint of `--model` in the output directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Defaults to the validation split in the output directory.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "vision")]
        model: ModelArg,
    },
    /// Compare the vision and baseline learning curves.
    Report,
    /// Run gradient checks, oracle comparisons and format round trips.
    Selftest {
        /// Corrupts the GRU backward pass by this relative amount.
        #[arg(long, hide = true)]
        perturb_gru: Option<f64>,
    },
}

fn load_config(cli: &Cli) -> CliResult<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.dataset.seed = seed;
        cfg.train.seed = seed;
    }
    if let Some(epochs) = cli.epochs {
        cfg.train.epochs = epochs;
    }
    if let Some(out) = &cli.out {
        cfg.paths.out = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Appends a line to a `String` buffer, which cannot fail.
macro_rules! say {
    ($out:expr, $($arg:tt)*) => {
        writeln!($out, $($arg)*).expect("writing to a String")
    };
}

/// Runs one command, appending its report to `out`. Whatever was written
/// before a failure is still printed.
fn run(cli: Cli, out: &mut String) -> CliResult<()> {
    if let Command::Selftest { perturb_gru } = cli.command {
        let outcome = commands::selftest(perturb_gru);
        for c in &outcome.checks {
            say!(out, "{c}");
        }
        say!(out, "{} checks in {:.1} s", outcome.checks.len(), outcome.elapsed.as_secs_f64());
        return outcome.into_result().map(drop);
    }
    let cfg = load_config(&cli)?;
    match cli.command {
        Command::Generate => {
            let s = commands::generate(&cfg, cli.workers)?;
            let r = &s.report;
            say!(out, "config hash {}", r.config_hash);
            say!(out, "episodes    train {} / validation {}", r.episodes_train, r.episodes_validation);
            say!(out, "samples     train {} / validation {}", r.samples_train, r.samples_validation);
            say!(
                out,
                "NLOS share  train {:.3} / validation {:.3}",
                r.balance_train.p_nlos,
                r.balance_validation.p_nlos
            );
            say!(out, "wrote {} and {}", s.train_path.display(), s.val_path.display());
        }
        Command::Train { model } => {
            let s = commands::train(&cfg, model.into())?;
            say!(
                out,
                "{} model: {} iterations in {:.0} s, selected iteration {}",
                s.model.name(),
                s.iterations,
                s.seconds,
                s.selected_iteration
            );
            out.push_str(&metrics_table(&[("train", &s.train), ("validation", &s.validation)]));
            say!(out, "wrote {} and {}", s.checkpoint.display(), s.curve.display());
        }
        Command::Eval { checkpoint, dataset, model } => {
            let checkpoint = checkpoint.unwrap_or_else(|| cfg.checkpoint_path(model.into()));
            let dataset = dataset.unwrap_or_else(|| cfg.val_path());
            let r = commands::eval(&checkpoint, &dataset)?;
            say!(out, "{}", serde_json::to_string_pretty(&r).expect("report serializes"));
        }
        Command::Report => {
            commands::report(&cfg)?;
            let path = commands::summary_path(&cfg);
            out.push_str(&std::fs::read_to_string(&path).map_err(|source| CliError::Io { path, source })?);
            say!(out, "wrote {}", commands::comparison_path(&cfg).display());
        }
        Command::Selftest { .. } => unreachable!("handled above"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let mut out = String::new();
    let result = run(Cli::parse(), &mut out);
    // A closed pipe (`blockwatch eval | head`) is not an error.
    let _ = std::io::stdout().lock().write_all(out.as_bytes());
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
