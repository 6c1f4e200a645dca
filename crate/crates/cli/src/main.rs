//! `plml`: runs the pseudo-label meta-learning pipeline stage by stage.
//!
//! Exit codes: 0 success, 1 usage, configuration or input error, 2 numeric
//! failure during a stage.

mod artifacts;
mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use thiserror::Error;

use commands::Ctx;
use config::Loaded;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(String),
    #[error("missing input: {0}")]
    MissingInput(String),
    #[error("{stage}: {detail}")]
    Failed { stage: &'static str, detail: String },
    #[error("numeric failure in {stage}: {detail}")]
    Numeric { stage: &'static str, detail: String },
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Numeric { .. } => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "plml", version, about = "Semi-supervised few-shot pipeline on feature vectors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Experiment configuration (TOML).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides the configured master seed.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Only log warnings and errors.
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Command {
    /// Generate the synthetic dataset.
    Synth,
    /// Partition classes and split base classes into labeled, unlabeled and test.
    Split,
    /// Pre-train backbone and base classifier.
    Pretrain,
    /// Label the unlabeled pool with the pre-trained classifier.
    Pseudolabel,
    /// Episodic finetuning on labeled plus pseudo-labeled data.
    Metatrain,
    /// Few-shot evaluation on novel classes.
    Eval,
    /// Accuracy against labels per class, base versus PLML.
    Sweep,
    /// Class-aware versus practical unlabeled selection.
    CompareSelection,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::Split => "split",
            Command::Pretrain => "pretrain",
            Command::Pseudolabel => "pseudolabel",
            Command::Metatrain => "metatrain",
            Command::Eval => "eval",
            Command::Sweep => "sweep",
            Command::CompareSelection => "compare-selection",
        }
    }
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("FSL_THREADS") else { return Ok(()) };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Config(format!("FSL_THREADS: {v:?} is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Config(format!("FSL_THREADS: {e}")))
}

fn run(cli: Cli) -> Result<(), CliError> {
    configure_threads()?;
    let path = cli.config.ok_or_else(|| CliError::Usage("--config PATH is required".into()))?;
    let loaded = Loaded::read(&path, cli.seed, cli.out.as_deref())?;
    let ctx = Ctx::new(loaded, cli.command.name());
    log::info!("{} (seed {})", cli.command.name(), ctx.loaded.config.seed);
    match cli.command {
        Command::Synth => commands::synth(ctx),
        Command::Split => commands::split(ctx),
        Command::Pretrain => commands::pretrain(ctx),
        Command::Pseudolabel => commands::pseudolabel(ctx),
        Command::Metatrain => commands::metatrain(ctx),
        Command::Eval => commands::eval(ctx),
        Command::Sweep => commands::sweep(ctx),
        Command::CompareSelection => commands::compare_selection(ctx),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
