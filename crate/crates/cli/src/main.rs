//! `causalrm`: generate benchmark data, train reward models, evaluate,
//! probe, sweep ablations and assemble reports.
//!
//! Exit status: 0 on success, 2 for invalid configuration or arguments,
//! 1 for any other failure (missing inputs, I/O, training errors).

mod commands;
mod config;
mod manifest;
mod summary;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use crate::config::ConfigArgs;

/// Invalid user input: bad flag values, unknown keys or variant names.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Parser, Debug)]
#[command(name = "causalrm", version, about = "Factored causal reward models on a synthetic preference benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug, Clone)]
pub struct OutArg {
    /// Output directory.
    #[arg(long, env = "CAUSALRM_OUT_ROOT", default_value = "runs")]
    pub out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate train, id_test, ood_test and hacked_test datasets.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        out: OutArg,
        /// Also write the prefix-perturbed training split.
        #[arg(long)]
        hacked_train: bool,
    },
    /// Train one model variant on a training split.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        out: OutArg,
        /// Training dataset (the `.jsonl` extension may be omitted).
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "full")]
        variant: String,
        /// Check analytic gradients against finite differences on the first batch before training.
        #[arg(long)]
        grad_check: bool,
    },
    /// Evaluate a checkpoint on one or more datasets.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        out: OutArg,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, required = true, num_args = 1..)]
        data: Vec<PathBuf>,
        /// Model name in the report (default: checkpoint file name without `_seedN`).
        #[arg(long)]
        name: Option<String>,
    },
    /// Train a fresh linear probe on a frozen latent channel.
    Probe {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        out: OutArg,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "non-causal")]
        channel: ProbeChannel,
        #[arg(long)]
        name: Option<String>,
    },
    /// Train and evaluate the seven ablation variants for every seed.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        out: OutArg,
        /// Skip the standard reward model baseline.
        #[arg(long)]
        no_baseline: bool,
        /// Skip the clean-versus-hacked training comparison.
        #[arg(long)]
        no_sycophancy: bool,
    },
    /// Merge report CSVs in a directory into one summary.
    Report {
        #[arg(long)]
        dir: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ProbeChannel {
    Causal,
    NonCausal,
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenData { cfg, out, hacked_train } => commands::gen_data(&cfg, &out.out, hacked_train),
        Command::Train { cfg, out, data, variant, grad_check } => {
            commands::train(&cfg, &out.out, &data, &variant, grad_check)
        }
        Command::Eval { cfg, out, checkpoint, data, name } => commands::eval(&cfg, &out.out, &checkpoint, &data, name),
        Command::Probe { cfg, out, checkpoint, data, channel, name } => {
            commands::probe(&cfg, &out.out, &checkpoint, &data, channel, name)
        }
        Command::Ablate { cfg, out, no_baseline, no_sycophancy } => {
            commands::ablate(&cfg, &out.out, !no_baseline, !no_sycophancy)
        }
        Command::Report { dir } => commands::report(&dir),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
