use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lyt_cli::pipeline::{self, threads_from_env};
use lyt_cli::{CliError, ExperimentConfig, Outcome, Overrides, RunOptions};

#[derive(Parser)]
#[command(name = "lyt", version, about = "Latent-dynamics experiments on synthetic video")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Experiment configuration (TOML). Defaults to the single-pendulum desk
    /// configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed for data, initialization and training
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Run only this training phase.
    #[arg(long, global = true, value_parser = clap::value_parser!(u8).range(1..=2))]
    phase: Option<u8>,
    /// Lyapunov loss weight; 0 skips Phase 2.
    #[arg(long, global = true)]
    lyap: Option<f64>,
    /// Use the Lite encoder.
    #[arg(long, global = true)]
    lite: bool,
    /// Step count of both training phases.
    #[arg(long, global = true)]
    steps: Option<u64>,
    /// Skip commands whose output already exists.
    #[arg(long, global = true)]
    no_overwrite: bool,
    /// Continue training from the phase checkpoints on disk.
    #[arg(long, global = true)]
    resume: bool,
    /// Checkpoint for `evaluate` and `gradcheck` (default checkpoints/final.lytc).
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Suppress progress messages on stderr
    #[arg(long, short, global = true)]
    quiet: bool,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Render the train and eval datasets.
    Generate,
    /// Phase 1, probing and selection, then Phase 2.
    Train,
    /// Metrics of the trained model on the eval split.
    Evaluate,
    /// Full/Lite × with/without Lyapunov grid.
    Ablate,
    /// SVG overlays, ranking bars and loss curves.
    Plot,
    /// Finite-difference audit of every loss gradient.
    Gradcheck,
    /// Print the resolved configuration as TOML.
    Config,
}

fn run(cli: Cli) -> Result<Outcome, CliError> {
    let base = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    let cfg = base.with_overrides(&Overrides {
        seed: cli.seed,
        out: cli.out.clone(),
        lyap: cli.lyap,
        lite: cli.lite,
        steps: cli.steps,
    });
    let opts = RunOptions {
        no_overwrite: cli.no_overwrite,
        phase: cli.phase,
        resume: cli.resume,
        checkpoint: cli.checkpoint.clone(),
        threads: threads_from_env(),
        verbose: !cli.quiet,
    };
    match cli.command {
        Command::Generate => pipeline::generate(&cfg, &opts),
        Command::Train => pipeline::train(&cfg, &opts),
        Command::Evaluate => pipeline::evaluate(&cfg, &opts),
        Command::Ablate => pipeline::ablate(&cfg, &opts),
        Command::Plot => pipeline::plot(&cfg, &opts),
        Command::Gradcheck => pipeline::run_gradcheck(&cfg, &opts),
        Command::Config => {
            cfg.validate()?;
            print!("# config_hash={}\n{}", cfg.hash(), cfg.to_toml()?);
            Ok(Outcome::Done)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(_) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
