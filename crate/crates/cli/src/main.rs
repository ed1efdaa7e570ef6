//! `gridvit`: synthetic data, training, cross-validation, and attention maps.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gridvit::data::FusionMode;

use crate::config::RunConfig;
use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(
    name = "gridvit",
    version,
    about = "Grid-packed multimodal volume classification with a vision transformer"
)]
pub struct Cli {
    /// Run config JSON [default: none, built-in defaults]
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random stream; overrides the config [default: config value, 0 if unset]
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for parallel evaluation [default: all cores]
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Print only results, no progress
    #[arg(long, global = true, default_value_t = false)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a labeled synthetic dataset
    Synth(SynthArgs),
    /// Train one model and write a checkpoint plus its training log
    Train(TrainArgs),
    /// Score a checkpoint, or run nested cross-validation
    Eval(EvalArgs),
    /// Write an attention-rollout heatmap for one case
    Explain(ExplainArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Synthetic dataset spec JSON [default: none, built-in spec]
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Output directory for volumes/ and manifest.jsonl
    #[arg(long)]
    pub out: PathBuf,
}

/// Overrides shared by the data-consuming subcommands.
#[derive(Debug, Args)]
pub struct DataArgs {
    /// Case manifest; overrides the config [default: config `manifest`]
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Input configuration; overrides the config [default: config `fusion`, early if unset]
    #[arg(long, value_parser = parse_fusion)]
    pub fusion: Option<FusionMode>,
    /// Training epochs; overrides the config [default: config value, 100 if unset]
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Checkpoint path; the log goes beside it as <name>.trainlog.jsonl
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint to score on every manifest case [default: none]
    #[arg(long, conflicts_with = "cv", required_unless_present = "cv")]
    pub checkpoint: Option<PathBuf>,
    /// Run nested cross-validation instead of scoring a checkpoint
    #[arg(long, default_value_t = false)]
    pub cv: bool,
    /// With --cv, run all four input configurations (T1, T2, late, early)
    #[arg(long, default_value_t = false, requires = "cv")]
    pub ablation: bool,
    /// Outer folds; overrides the config [default: config value, 10 if unset]
    #[arg(long)]
    pub folds: Option<usize>,
    /// Report directory; overrides the config [default: config `output_dir`, . if unset]
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
}

#[derive(Debug, Args)]
pub struct ExplainArgs {
    /// Trained checkpoint
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Case id from the manifest
    #[arg(long = "case")]
    pub case_id: String,
    /// Output prefix for <prefix>.pgm, <prefix>.csv and <prefix>.prediction.json
    #[arg(long)]
    pub out: PathBuf,
    /// Case manifest; overrides the config [default: config `manifest`]
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

fn parse_fusion(s: &str) -> Result<FusionMode, String> {
    s.parse()
}

/// Run config after applying flag overrides.
pub struct Context {
    pub run: RunConfig,
    pub seed_overridden: bool,
    pub quiet: bool,
}

impl Context {
    pub fn log(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    }
    let mut run = RunConfig::load(cli.config.as_deref())?;
    if let Some(s) = cli.seed {
        run.seed = s;
    }
    let ctx = Context {
        run,
        seed_overridden: cli.seed.is_some(),
        quiet: cli.quiet,
    };
    match cli.command {
        Command::Synth(a) => commands::synth(&ctx, &a),
        Command::Train(a) => commands::train(ctx, &a),
        Command::Eval(a) => commands::eval(ctx, &a),
        Command::Explain(a) => commands::explain(ctx, &a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
