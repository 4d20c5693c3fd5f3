mod commands;
mod config;
mod output;
mod render;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use respmotion::{par, Error, ErrorKind, Result};

use config::Config;

/// Breathing-motion models from 4D image series, and their transfer to
/// static patients.
#[derive(Parser)]
#[command(name = "respmotion", version)]
struct Cli {
    /// TOML configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true, env = "RESPMOTION_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthetic 4D phantom with ground-truth motion.
    Phantom,
    /// Register every phase to the reference phase (and a target, if given).
    Register,
    /// Fit a motion model to registered phase fields.
    Fit,
    /// Transfer the 4D patient's model to a static target patient.
    Transfer,
    /// DICE overlaps and endpoint errors.
    Evaluate,
    /// Warp a volume through a model for every signal sample.
    Animate {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        volume: Option<PathBuf>,
        #[arg(long)]
        signal: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<PathBuf> {
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let (stage, outputs) = par::with_threads(cli.threads, || match cli.command {
        Command::Phantom => ("phantom", commands::phantom(&mut cfg)),
        Command::Register => ("register", commands::register(&mut cfg)),
        Command::Fit => ("fit", commands::fit(&mut cfg)),
        Command::Transfer => ("transfer", commands::transfer(&mut cfg)),
        Command::Evaluate => ("evaluate", commands::evaluate(&mut cfg)),
        Command::Animate { model, volume, signal } => {
            cfg.io.model = model.or(cfg.io.model.take());
            cfg.io.volume = volume.or(cfg.io.volume.take());
            cfg.io.signal = signal.or(cfg.io.signal.take());
            ("animate", commands::animate(&mut cfg))
        }
    })?;
    let outputs = outputs.map_err(|e| e.in_stage(stage))?;
    outputs
        .write(&cli.out, &cfg.to_toml())
        .map_err(|e| e.in_stage(format!("{stage}: write outputs")))
}

fn exit_code(e: &Error) -> u8 {
    match e.kind() {
        ErrorKind::Validation => 2,
        ErrorKind::Numerical => 3,
        ErrorKind::Io => 4,
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(manifest) => {
            println!("wrote {}", manifest.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
