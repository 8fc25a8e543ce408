mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use swapkit_core::SwapError;

#[derive(Parser)]
#[command(name = "swapkit", version, about = "Training-free concept swapping")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
pub struct ConfigArgs {
    /// TOML config, or a JSON sidecar from an earlier run.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a setting, e.g. `--set lambda=1`. Repeatable; wins over the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Args)]
pub struct EditArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub source: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// Metadata sidecar; defaults to the output path with a `.json` extension.
    #[arg(long)]
    pub sidecar: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Swap the source concept for the target concept.
    Swap(EditArgs),
    /// Insert the target concept into `bbox_override`.
    Insert(EditArgs),
    /// Remove the source concept.
    Remove(EditArgs),
    /// Localize the source concept and dump its bbox and saliency map.
    Bbox(commands::BboxArgs),
    /// Run a method over a benchmark layout and report metrics.
    Bench(commands::BenchArgs),
    /// Time SDS or DDS under several step-skipping periods.
    AccelDemo(commands::AccelArgs),
}

/// A failure with its process exit code.
#[derive(Debug, thiserror::Error)]
#[error("{name}: {message}")]
pub struct CliError {
    pub code: u8,
    pub name: String,
    pub message: String,
}

pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_PIPELINE: u8 = 3;
pub const EXIT_LOCALIZE: u8 = 4;

impl CliError {
    pub fn config(name: &str, message: impl Into<String>) -> Self {
        Self {
            code: EXIT_CONFIG,
            name: name.to_string(),
            message: message.into(),
        }
    }

    pub fn from_swap(code: u8, e: &SwapError) -> Self {
        Self {
            code,
            name: e.name().to_string(),
            message: e.to_string(),
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Swap(a) => commands::edit(commands::Edit::Swap, &a),
        Command::Insert(a) => commands::edit(commands::Edit::Insert, &a),
        Command::Remove(a) => commands::edit(commands::Edit::Remove, &a),
        Command::Bbox(a) => commands::bbox(&a),
        Command::Bench(a) => commands::bench(&a),
        Command::AccelDemo(a) => commands::accel_demo(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}
