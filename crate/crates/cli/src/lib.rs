//! The `sosvae` command line. Training, evaluation and image generation run
//! in-process; `edit --server` goes through the HTTP client and `serve`
//! starts the editing service.

pub mod commands;
pub mod config;

use std::net::IpAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad flags, config, paths or argument values. Exit code 2.
    #[error("{0}")]
    Usage(String),
    /// Anything that fails while doing the work. Exit code 1.
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn usage(e: impl std::fmt::Display) -> Self {
        CliError::Usage(e.to_string())
    }

    pub fn runtime(e: impl std::fmt::Display) -> Self {
        CliError::Runtime(e.to_string())
    }

    pub fn exit_code(&self) -> ExitCode {
        match self {
            CliError::Usage(_) => ExitCode::from(2),
            CliError::Runtime(_) => ExitCode::from(1),
        }
    }
}

impl From<sosvae::Error> for CliError {
    fn from(e: sosvae::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "sosvae", version, about = "Low-rank Gaussian observation VAEs: train, sample, scale and edit")]
pub struct Cli {
    /// More logging; repeat for debug output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write a checkpoint and a per-epoch log CSV.
    Train(TrainArgs),
    /// Report likelihood, KL, entropy and pixel variance on a dataset.
    Evaluate(EvaluateArgs),
    /// Write mean and sample PNGs for a run of seeds.
    Sample(SampleArgs),
    /// Write a grid slerping the factor noise between four corners.
    Interpolate(InterpolateArgs),
    /// Write one strip per principal component, sweeping its scale.
    Scale(ScaleArgs),
    /// Apply pixel edits to a sample and write before and after images.
    Edit(EditArgs),
    /// Serve a checkpoint over HTTP.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML run file; built-in defaults otherwise.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Train on the PNGs in this directory instead of the configured data.
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// Checkpoint path.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Log CSV path.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Continue from a checkpoint. Its stored configuration wins over the
    /// file, except that `--epochs` sets the new total.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Run file whose `[data]` table names the evaluation data.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub count: usize,
    /// Image `i` uses seed `seed + i`.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct InterpolateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub steps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ScaleArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Half-open range like `0..10`, or a single index. Defaults to the first
    /// ten components.
    #[arg(long)]
    pub components: Option<String>,
    /// `start:stop:step`, inclusive of `stop`.
    #[arg(long, default_value = "-5:5:0.5", allow_hyphen_values = true)]
    pub scales: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EditArgs {
    /// Local checkpoint; not needed with `--server`.
    #[arg(long, required_unless_present = "server")]
    pub checkpoint: Option<PathBuf>,
    /// Base URL of a running service, e.g. `http://127.0.0.1:8080`.
    #[arg(long, conflicts_with = "checkpoint")]
    pub server: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// CSV lines `x,y,c,value`, 0-based.
    #[arg(long)]
    pub edits: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: IpAddr,
    /// Built editor assets, served under `/`.
    #[arg(long)]
    pub static_dir: Option<PathBuf>,
    /// Allowed browser origin; repeatable.
    #[arg(long = "cors-origin", default_value = sosvae_service::DEFAULT_CORS_ORIGIN)]
    pub cors_origins: Vec<String>,
    #[arg(long, default_value_t = sosvae_service::DEFAULT_SESSION_CAPACITY)]
    pub sessions: usize,
}

pub fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => tracing::Level::WARN,
        1 => tracing::Level::INFO,
        _ => tracing::Level::DEBUG,
    };
    let _ = tracing_subscriber::fmt()
        .with_max_level(level)
        .with_writer(std::io::stderr)
        .try_init();
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train(a) => commands::train(&a),
        Command::Evaluate(a) => commands::evaluate(&a),
        Command::Sample(a) => commands::sample(&a),
        Command::Interpolate(a) => commands::interpolate(&a),
        Command::Scale(a) => commands::scale(&a),
        Command::Edit(a) => commands::edit(&a),
        Command::Serve(a) => commands::serve(&a),
    }
}
