//! `dime`: synthetic data, MLP training, explanations and validation runs.
//!
//! Exit status: 0 success, 1 a validation threshold failed, 2 usage, config
//! or I/O error, 3 the model or its protocol failed.

mod commands;
mod config;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::CommonArgs;

#[derive(Parser, Debug)]
#[command(name = "dime", version, about = "Disentangled explanations for two-modality classifiers")]
struct Cli {
    #[command(flatten)]
    common: CommonArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic dataset and its 80/10/10 splits.
    GenData {
        /// Number of points to generate.
        #[arg(long, default_value_t = 100_000)]
        n: usize,
    },
    /// Train the synthetic-task MLP.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        accuracy_floor: Option<f64>,
    },
    /// Explain one point: UC, MI and plain LIME weights for both modalities.
    Explain {
        /// Directory written by `gen-data`; the test split is used.
        #[arg(long, required_unless_present = "inputs", conflicts_with = "inputs")]
        data: Option<PathBuf>,
        /// JSON-lines file of `[x1, x2]` pairs, for external models.
        #[arg(long)]
        inputs: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        point: usize,
        #[arg(long, default_value_t = 1)]
        class: usize,
    },
    /// Correlate explanations with synthetic ground truth over test points.
    Validate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 200)]
        n_points: usize,
    },
    /// Compare modality-1 explanations before and after swapping modality 2.
    Swaptest {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 50)]
        pairs: usize,
        #[arg(long, default_value_t = 1)]
        class: usize,
    },
    /// Count model evaluations for cold and warm explanations.
    Bench {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 1)]
        class: usize,
    },
    /// Serve a reference model over the external protocol on stdin/stdout.
    #[command(hide = true)]
    StubModel {
        #[arg(long, default_value = "additive")]
        behavior: dime::gateway::stub::StubBehavior,
        #[arg(long, default_value_t = 2)]
        classes: usize,
        /// Modality kinds, comma separated.
        #[arg(long, default_value = "dense,dense")]
        kinds: String,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match commands::run(&cli.common, cli.command) {
        Ok(commands::Outcome::Passed) => ExitCode::SUCCESS,
        Ok(commands::Outcome::ThresholdFailed) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
