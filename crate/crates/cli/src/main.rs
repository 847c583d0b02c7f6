use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ednil::config::Method;
use ednil::engine::SweepAxis;

mod commands;

/// Environment inference and invariant learning experiments.
#[derive(Debug, Parser)]
#[command(name = "ednil", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Experiment configuration (strict JSON).
    #[arg(short, long)]
    config: PathBuf,
    /// Replaces the configured seed list.
    #[arg(long, value_delimiter = ',')]
    seed: Vec<u64>,
    /// Replaces the configured output directory.
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate train, validation and test datasets.
    Gen(Common),
    /// Train one model per seed and write reports and checkpoints.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        method: Option<Method>,
    },
    /// Evaluate a saved invariant predictor on the configured test environments.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Repeat training along one configuration axis.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// color-noise, k or pretrain-steps.
        #[arg(long)]
        axis: SweepAxis,
        /// Comma separated values, or start:stop:step.
        #[arg(long)]
        values: String,
        #[arg(long)]
        method: Option<Method>,
    },
    /// Entropy conditions and oracle agreement of a saved environment model.
    Diag {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Quantile bins for continuous factors.
        #[arg(long, default_value_t = 4)]
        bins: usize,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(c) => commands::gen(&c.config, &c.seed, c.output),
        Command::Train { common: c, method } => commands::train(&c.config, &c.seed, c.output, method),
        Command::Eval { common: c, checkpoint } => commands::eval(&c.config, &c.seed, c.output, &checkpoint),
        Command::Sweep {
            common: c,
            axis,
            values,
            method,
        } => commands::sweep(&c.config, &c.seed, c.output, axis, &values, method),
        Command::Diag {
            common: c,
            checkpoint,
            bins,
        } => commands::diag(&c.config, &c.seed, c.output, &checkpoint, bins),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
