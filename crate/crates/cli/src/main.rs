use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use pwff_core::fed::{Phase, StrategyName};
use pwff_sim::artifacts::Layout;
use pwff_sim::{report, run, ExperimentConfig};

#[derive(Parser, Debug)]
#[command(name = "pwff-sim", version, about = "Simulate personalized wireless federated fine-tuning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug)]
struct RunArgs {
    /// Experiment file (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override the master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the strategy list, e.g. `PWFF,FedLoRA`.
    #[arg(long, value_delimiter = ',')]
    strategies: Option<Vec<StrategyName>>,
    /// Artifact directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Federated instruction tuning.
    Instruct(RunArgs),
    /// Federated reward-model training; needs instruct checkpoints.
    Reward(RunArgs),
    /// Personalized PPO alignment; needs instruct and reward checkpoints.
    Align(RunArgs),
    /// All three phases in order.
    Full(RunArgs),
    /// Per-round series and the comparison table from existing metrics.
    Report {
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

fn load(args: &RunArgs) -> Result<ExperimentConfig, String> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(s) = &args.strategies {
        cfg.strategies = s.clone();
    }
    cfg.validate().map_err(|e| format!("{}: {}", args.config.display(), e))?;
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (args, phases): (&RunArgs, &[Phase]) = match &cli.command {
        Command::Instruct(a) => (a, &[Phase::Instruct]),
        Command::Reward(a) => (a, &[Phase::Reward]),
        Command::Align(a) => (a, &[Phase::Align]),
        Command::Full(a) => (a, &Phase::ALL),
        Command::Report { out } => {
            return match report::render(&Layout::new(out)) {
                Ok(files) => {
                    for f in files {
                        println!("{}", f);
                    }
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("error: {:#}", e);
                    ExitCode::FAILURE
                }
            };
        }
    };
    let cfg = match load(args) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("config error: {}", e);
            return ExitCode::from(2);
        }
    };
    match run::execute(&cfg, &Layout::new(&args.out), phases) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {:#}", e);
            ExitCode::FAILURE
        }
    }
}
