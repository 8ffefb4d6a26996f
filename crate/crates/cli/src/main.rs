//! `safl` binary: run one federated-learning experiment or sweep sybil counts
//! across aggregators, emitting deterministic CSV/JSON artifacts.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use safl_cli::{cmd_run, cmd_sweep};

#[derive(Parser)]
#[command(
    name = "safl",
    version,
    about = "Deterministic federated-learning simulator with sybil adversaries and robust aggregation"
)]
struct Cli {
    /// Master seed override applied on top of the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Suppress progress lines on stdout.
    #[arg(long, global = true)]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment from a JSON config into an output directory.
    Run {
        /// Path to the experiment config (JSON).
        #[arg(long)]
        config: PathBuf,
        /// Output directory (falls back to the config's out_dir).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the cross-product of sybil counts, target modes, and aggregators.
    Sweep {
        /// Path to the base config; its single adversary is the sweep template.
        #[arg(long)]
        config: PathBuf,
        /// Output root; one subdirectory per cell (falls back to out_dir).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Sybil counts: an inclusive range like 1..4 or a comma list like 1,3.
        #[arg(long, default_value = "1..4")]
        sybils: String,
        /// Target modes: single, multi, or single,multi.
        #[arg(long, default_value = "single")]
        modes: String,
        /// Comma list of aggregators: fedavg, krum, multi_krum, foolsgold, safl.
        #[arg(long, default_value = "fedavg,safl")]
        aggregators: String,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run { config, out } => cmd_run(config, out.as_deref(), cli.seed, cli.quiet),
        Command::Sweep { config, out, sybils, modes, aggregators } => cmd_sweep(
            config,
            out.as_deref(),
            sybils,
            modes,
            aggregators,
            cli.seed,
            cli.quiet,
        ),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
