//! Command line for prompt-conditioned channel pruning experiments.

mod config;
mod run;

use clap::{Parser, Subcommand};
use config::load_config;
use run::CliError;
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "promptprune", version, about = "Prompt-conditioned structural channel pruning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Search masks and fine-tune a pruned model.
    Prune {
        /// Experiment config (JSON).
        #[arg(long)]
        config: PathBuf,
        /// Dotted config overrides, e.g. --set stage1.epochs=5
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Confirm running the `full` profile (complete datasets, long).
        #[arg(long)]
        allow_full: bool,
        /// Run up to N seeds as parallel worker processes.
        #[arg(long, default_value_t = 1)]
        parallel_seeds: usize,
        /// Skip the shared results CSV (used by parallel workers).
        #[arg(long, hide = true)]
        no_csv: bool,
    },
    /// Reuse masks or the mask generator from a finished run on a new task.
    Transfer {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Run directory of the source experiment.
        #[arg(long)]
        source_run: PathBuf,
        /// What to carry over: mask, hypernet (repeatable).
        #[arg(long = "mode", value_name = "MODE", default_values_t = [String::from("mask")])]
        modes: Vec<String>,
    },
    /// Aggregate finished runs into CSV, text and an accuracy-vs-FLOPs plot.
    Report {
        /// Directories to scan for record.json files (repeatable).
        #[arg(long = "runs", required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-layer FLOPs of an architecture, dense or under a mask set.
    Flops {
        #[arg(long)]
        arch: String,
        #[arg(long, default_value_t = 10)]
        classes: usize,
        #[arg(long)]
        maskset: Option<PathBuf>,
        /// Write JSON here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Copy the mask set of a finished run to a standalone file.
    MasksExport {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train (or fetch from cache) the source model a config would use.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Prune { config, set, allow_full, parallel_seeds, no_csv } => {
            let cfg = load_config(&config, &set).map_err(CliError::Config)?;
            run::cmd_prune(&cfg, allow_full, parallel_seeds, no_csv)
        }
        Command::Transfer { config, set, source_run, modes } => {
            let cfg = load_config(&config, &set).map_err(CliError::Config)?;
            run::cmd_transfer(&cfg, &source_run, &modes)
        }
        Command::Report { runs, out } => run::cmd_report(&runs, &out),
        Command::Flops { arch, classes, maskset, out } => {
            run::cmd_flops(&arch, classes, maskset.as_deref(), out.as_deref())
        }
        Command::MasksExport { run, out } => run::cmd_masks_export(&run, &out),
        Command::Pretrain { config, set } => {
            let cfg = load_config(&config, &set).map_err(CliError::Config)?;
            run::cmd_pretrain(&cfg)
        }
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = dispatch(cli) {
        eprintln!("{}", e.message());
        std::process::exit(e.code());
    }
}
