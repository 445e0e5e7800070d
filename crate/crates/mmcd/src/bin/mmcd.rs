//! Command-line entry point.
//!
//! Exit codes: 0 on success, 2 for configuration errors (bad config file,
//! bad flag combinations), 3 for runtime failures (I/O, corrupt
//! checkpoints, numeric contract violations).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mmcd::experiments::{self, Overrides};

#[derive(Parser)]
#[command(name = "mmcd", about = "Multi-classifier discrepancy domain adaptation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Run config file (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config's output directory.
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Override the number of classifier heads.
    #[arg(long)]
    n_classifiers: Option<usize>,
    /// Override the loss variant: "full", "remove:i,j", "duplicate:i,j=k,l".
    #[arg(long)]
    variant: Option<String>,
}

impl CommonArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            output_dir: self.output_dir.clone(),
            n_classifiers: self.n_classifiers,
            variant: self.variant.clone(),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write metrics, boundary, and checkpoint artifacts.
    Train {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Evaluate a checkpoint against the configured dataset.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        /// Checkpoint file written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Compare loss variants and a 2-head baseline over several seeds.
    Ablate {
        #[command(flatten)]
        common: CommonArgs,
        /// Number of consecutive seeds, starting at the config seed.
        #[arg(long, default_value_t = 5)]
        seeds: usize,
    },
    /// Measure per-epoch time and convergence across head counts.
    Bench {
        #[command(flatten)]
        common: CommonArgs,
        /// Head counts to benchmark, comma-separated.
        #[arg(long, value_delimiter = ',', required = true)]
        n_list: Vec<usize>,
    },
}

fn run(cli: Cli) -> mmcd::Result<()> {
    match cli.command {
        Command::Train { common } => {
            let dir = experiments::cmd_train(&common.config, &common.overrides())?;
            println!("run artifacts written to {}", dir.display());
        }
        Command::Eval { common, checkpoint } => {
            let report = experiments::cmd_eval(&checkpoint, &common.config, &common.overrides())?;
            print!("{report}");
        }
        Command::Ablate { common, seeds } => {
            let dir = experiments::cmd_ablate(&common.config, &common.overrides(), seeds)?;
            println!("ablation results written to {}", dir.display());
        }
        Command::Bench { common, n_list } => {
            let dir = experiments::cmd_bench(&common.config, &common.overrides(), &n_list)?;
            println!("bench results written to {}", dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config_error() {
                ExitCode::from(2)
            } else {
                ExitCode::from(3)
            }
        }
    }
}
