//! `grcvit` command-line front end.
//!
//! Exit codes: 0 success, 2 bad arguments, 3 I/O failure, 4 numeric failure.

mod commands;
mod config;
mod error;
mod inputs;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgAction, Parser, Subcommand};

use config::RunConfig;
use error::CliResult;

#[derive(Parser, Debug)]
#[command(name = "grcvit", version, about = "Complexity-routed multi-granularity vision transformer toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Image file, directory of PNG/PGM/PPM images, or `synth:SPEC[*N]`
    /// (e.g. `synth:noise:3@64x64*10`).
    #[arg(long, global = true)]
    input: Option<String>,
    /// Output directory (default `grcvit-out`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    /// Granularity level 1 (coarse), 2 or 3 (fine).
    #[arg(long, global = true, value_parser = clap::value_parser!(u8).range(1..=3))]
    granularity: Option<u8>,
    /// `adaptive`, `fixed:G` or `random[:SEED]`.
    #[arg(long, global = true)]
    routing: Option<String>,
    /// Estimator parameters JSON written by `train-estimator`.
    #[arg(long, global = true)]
    estimator: Option<PathBuf>,
    /// Model checkpoint stem (`<stem>.json` + `<stem>.bin`).
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// TOML file with any run key; flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = ArgAction::Count)]
    verbose: u8,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Complexity descriptors, fused score and granularity per image, plus a histogram.
    Profile,
    /// Fit the descriptor weights and thresholds on a corpus.
    TrainEstimator,
    /// Attention-stage FLOPs of the Swin baseline and the shared core.
    Flops,
    /// Train the fine stage on a small labeled set under a routing source.
    TrainToy,
    /// Route images through the coarse stage (and the fine stage with --checkpoint).
    Route,
    /// Finite-difference check of the model gradients.
    Gradcheck,
    /// Write per-block attention probabilities as CSV.
    AttnDump,
}

impl Cli {
    fn run_config(&self) -> CliResult<RunConfig> {
        let file = match &self.config {
            Some(path) => RunConfig::from_file(path)?,
            None => RunConfig::default(),
        };
        let flags = RunConfig {
            input: self.input.clone(),
            out: self.out.clone(),
            seed: self.seed,
            epochs: self.epochs,
            granularity: self.granularity,
            routing: self.routing.clone(),
            estimator: self.estimator.clone(),
            checkpoint: self.checkpoint.clone(),
            ..Default::default()
        };
        Ok(file.merge(flags))
    }
}

fn run(cli: &Cli) -> CliResult<()> {
    let cfg = cli.run_config()?;
    match cli.command {
        Command::Profile => commands::profile(&cfg),
        Command::TrainEstimator => commands::train_estimator_cmd(&cfg),
        Command::Flops => commands::flops(&cfg),
        Command::TrainToy => commands::train_toy(&cfg),
        Command::Route => commands::route(&cfg),
        Command::Gradcheck => commands::gradcheck(&cfg),
        Command::AttnDump => commands::attn_dump(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code as u8)
        }
    }
}
