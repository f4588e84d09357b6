use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod config;

/// Failure reported as a single `error[category]: message` line.
#[derive(Debug)]
pub struct CliError {
    pub category: &'static str,
    pub message: String,
}

impl CliError {
    pub fn new(category: &'static str, message: impl Into<String>) -> Self {
        CliError { category, message: message.into() }
    }

    pub fn config(message: impl Into<String>) -> Self {
        CliError::new("invalid-config", message)
    }
}

impl From<fmd_core::Error> for CliError {
    fn from(e: fmd_core::Error) -> Self {
        CliError::new(e.category(), e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        fmd_core::Error::from(e).into()
    }
}

#[derive(Parser, Debug)]
#[command(name = "fmd", version, about = "Diffusion-prior counterfactual explanations for multivariate time series")]
pub struct Cli {
    /// Run configuration (TOML, or JSON by extension).
    #[arg(long, global = true, env = "FMD_CONFIG")]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.lr=1e-3`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Seed for every random choice of the run.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; 1 is the bitwise reference path.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
    /// Allow writing into a non-empty output directory.
    #[arg(long, global = true)]
    pub force: bool,
    /// Repeat for more log output on stderr.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic class-conditional dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the phase-0 prior, one network per fraction.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run distillation phases, each doubling the sampling stride.
    Distill {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        phases: Option<u32>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the downstream classifier to be explained.
    Classifier {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate counterfactuals for input samples.
    Explain {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        classifier: PathBuf,
        /// Sample CSV, directory of CSVs, or dataset directory (test split).
        #[arg(long)]
        input: PathBuf,
        /// Class index or `all`.
        #[arg(long)]
        target: Option<String>,
        #[arg(long)]
        scale: Option<f64>,
        #[arg(long = "delta-t")]
        delta_t: Option<usize>,
        /// `per-fraction` or `per-step`.
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score counterfactuals written by `explain`.
    Evaluate {
        /// Output directory of `fmd explain`.
        #[arg(long)]
        explained: PathBuf,
        #[arg(long)]
        classifier: PathBuf,
        /// Dataset providing reference samples and sparsity thresholds.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rank FC features changed by counterfactuals and run the probe.
    Biomarker {
        #[arg(long)]
        explained: PathBuf,
        #[arg(long = "top-pct")]
        top_pct: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the resolved configuration.
    Config,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.message.replace(['\n', '\r'], " ");
            eprintln!("error[{}]: {msg}", e.category);
            ExitCode::FAILURE
        }
    }
}
