//! `mmba` command-line driver.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mmba::data::Split;
use mmba::{Error, Result};

use commands::Paths;
use config::RunConfig;

#[derive(Parser)]
#[command(name = "mmba", version, about = "Cross-modal attention forgery detection and localization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides both `synth.seed` and `train.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Checkpoint to evaluate; defaults to `<out>/model.ckpt`.
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Dataset split to evaluate.
    #[arg(long, global = true, default_value = "test")]
    split: String,
    /// Extra `key=value` overrides, applied after the file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Generate a synthetic dataset (train/val/test).
    Synth,
    /// Train a model; writes checkpoint, log and config.
    Train,
    /// Detection metrics of a checkpoint on one split.
    Eval,
    /// Localized segments and localization metrics on one split.
    Localize,
    /// Attention-variant and modality ablation table.
    Ablate,
    /// Finite-difference gradient suite.
    Gradcheck,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::UnknownKey(_) => 2,
        Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => 3,
        Error::Format { .. } => 4,
        _ => 1,
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for o in &cli.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::Usage(format!("--set expects KEY=VALUE, got `{o}`")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = cli.seed {
        cfg.set("synth.seed", &seed.to_string())?;
        cfg.set("train.seed", &seed.to_string())?;
    }
    let split: Split = cli.split.parse()?;
    let out = cli.out.clone().unwrap_or_else(|| match cli.command {
        Command::Synth => cfg.data_dir.clone(),
        _ => PathBuf::from("mmba-out"),
    });
    let paths = Paths { out, checkpoint: cli.checkpoint.clone(), split };
    match cli.command {
        Command::Synth => commands::synth(&cfg, &paths.out),
        Command::Train => commands::train_cmd(&cfg, &paths),
        Command::Eval => commands::eval(&cfg, &paths),
        Command::Localize => commands::localize(&cfg, &paths),
        Command::Ablate => commands::ablate(&cfg, &paths),
        Command::Gradcheck => commands::gradcheck(&cfg, &paths),
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
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("mmba: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
