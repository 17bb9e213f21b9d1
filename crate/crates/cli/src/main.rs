use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use holopos_cli::config::ExperimentConfig;
use holopos_cli::runner::{self, RunContext};
use holopos_cli::CliError;

/// Desk-scale positioning simulator: bound-driven beamforming design,
/// source-domain estimator training, and federated target-domain adaptation.
#[derive(Parser)]
#[command(name = "holopos", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// TOML configuration file; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed, overriding the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory for artifacts and the manifest.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Compare analytic bound gradients against finite differences over
    /// frame-count and element-count sweeps.
    ValidateGradients,
    /// Minimize the mean positioning bound over the region of interest.
    OptimizeBeamforming,
    /// Generate the simulated source dataset and pretrain the estimator.
    TrainSource,
    /// Run the federated target-domain adaptation.
    RunFl,
    /// Report target-domain error of the latest estimator on a fresh test set.
    Evaluate,
    /// Full pipeline: optimize-beamforming, train-source, run-fl, evaluate.
    All,
}

impl Command {
    fn subcommand(&self) -> runner::Subcommand {
        match self {
            Command::ValidateGradients => runner::Subcommand::ValidateGradients,
            Command::OptimizeBeamforming => runner::Subcommand::OptimizeBeamforming,
            Command::TrainSource => runner::Subcommand::TrainSource,
            Command::RunFl => runner::Subcommand::RunFl,
            Command::Evaluate => runner::Subcommand::Evaluate,
            Command::All => runner::Subcommand::All,
        }
    }
}

fn execute(cli: Cli) -> Result<(), CliError> {
    let mut config = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    let seed = config.seed;
    let ctx = RunContext { config, seed };
    runner::run(cli.command.subcommand(), &ctx, &cli.out)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
