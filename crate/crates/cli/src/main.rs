//! `vidprism gen|train|inspect|ablate`.
//!
//! Exit codes: 0 on success, 2 for usage, configuration or data errors, 3
//! when training diverges.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::RunConfig;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Diverged(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Diverged(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Diverged(m) => f.write_str(m),
        }
    }
}

impl From<vidprism::Error> for CliError {
    fn from(e: vidprism::Error) -> Self {
        match e {
            vidprism::Error::Diverged { .. } => CliError::Diverged(e.to_string()),
            other => CliError::Usage(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Usage(e.to_string())
    }
}

#[derive(Parser)]
#[command(
    name = "vidprism",
    version,
    about = "Multi-rate temporal mixture-of-experts over frame features"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Run configuration (flat TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory, overriding `out_dir` from the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Seed, overriding `seed` from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the configured synthetic dataset as `data.vpf`.
    Gen,
    /// Train and write report.json, steps.jsonl, usage.csv, checkpoint.json
    /// and timing.json.
    Train,
    /// Print merge traces, gate matrix and readout mass of one clip as JSON.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        clip: usize,
    },
    /// Train every variant along one axis and write `ablation_<axis>.csv`.
    Ablate {
        #[arg(long)]
        axis: String,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(out) = cli.out {
        cfg.set_out_dir(out);
    }
    if let Some(seed) = cli.seed {
        cfg.seed = Some(seed);
    }
    match cli.command {
        Command::Gen => commands::gen(&cfg),
        Command::Train => commands::train(&cfg),
        Command::Inspect { checkpoint, clip } => commands::inspect(&cfg, &checkpoint, clip),
        Command::Ablate { axis } => commands::ablate(&cfg, &axis),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
