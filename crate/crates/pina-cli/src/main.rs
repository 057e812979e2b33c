//! Experiment runner and accountant front-end.
//!
//! Exit codes: 0 on success, 1 on runtime failures (including infeasible
//! calibration), 2 on configuration errors.

mod commands;
mod config;
mod error;
mod manifest;
mod output;

use clap::{Args, Parser, Subcommand};
use commands::{cmd_accountant, cmd_compare, cmd_run, AccountantArgs};
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "pina", version, about = "Clustered DP federated learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write manifest, JSONL metrics, and summary CSV.
    Run(RunArgs),
    /// Calibrate a noise multiplier for a target budget, or report the
    /// budget a multiplier spends.
    Accountant(AccArgs),
    /// Run several (algorithm, seed) pairs and merge per-round accuracies.
    Compare(CompareArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Re-run the exact experiment recorded in a manifest.
    #[arg(long)]
    from_manifest: Option<PathBuf>,
    /// Override config fields by dotted path, e.g. --set privacy.q=0.1
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory (default: $PINA_OUTPUT_DIR or ./pina-out).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the initialization-stage sketches and their cluster
    /// assignments as sketches.jsonl (pina only).
    #[arg(long)]
    dump_sketches: bool,
}

#[derive(Args)]
struct AccArgs {
    /// Target budget: calibrate the noise multiplier for it.
    #[arg(long)]
    eps: Option<f64>,
    /// Noise multiplier: report the budget it spends.
    #[arg(long)]
    z: Option<f64>,
    /// Failure probability; defaults to 1/clients^1.1.
    #[arg(long)]
    delta: Option<f64>,
    /// Client count used for the default delta.
    #[arg(long, default_value_t = 200)]
    clients: usize,
    /// Poisson sampling rate per round.
    #[arg(long)]
    q: f64,
    /// Number of subsampled training rounds.
    #[arg(long)]
    rounds: u32,
    /// Full-participation initialization releases to compose (spend mode).
    #[arg(long, default_value_t = 0)]
    stage1_participations: u32,
    /// Emit machine-readable JSON instead of prose.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct CompareArgs {
    /// Base experiment config (TOML); algorithm and seed are overridden.
    #[arg(long)]
    config: PathBuf,
    /// Comma-separated algorithm list.
    #[arg(long, value_delimiter = ',')]
    algorithms: Vec<String>,
    /// Comma-separated seed list.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    /// Override config fields by dotted path.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory (default: $PINA_OUTPUT_DIR or ./pina-out).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run(args) => cmd_run(
            args.config.as_deref(),
            args.from_manifest.as_deref(),
            &args.set,
            args.out,
            args.dump_sketches,
        ),
        Command::Accountant(args) => cmd_accountant(&AccountantArgs {
            eps: args.eps,
            z: args.z,
            delta: args.delta,
            clients: args.clients,
            q: args.q,
            rounds: args.rounds,
            stage1_participations: args.stage1_participations,
            json: args.json,
        }),
        Command::Compare(args) => cmd_compare(
            &args.config,
            &args.algorithms,
            &args.seeds,
            &args.set,
            args.out,
        ),
    };
    if let Err(err) = outcome {
        eprintln!("{err}");
        std::process::exit(err.exit_code());
    }
}
