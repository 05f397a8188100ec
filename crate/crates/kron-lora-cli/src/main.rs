//! `kronlora`: verify, size, bench and train parameter-efficient adapters
//! on frozen linear layers.
//!
//! Every subcommand writes `<out>/<subcommand>.json` containing a manifest
//! (seed, version, timestamp, effective config) and the command's payload.
//! With the same `--seed` and configuration, two runs produce identical
//! reports except for the timestamp and wall-clock timing fields.
//!
//! Exit codes: 0 on success (for `verify`: all suites passed), 1 on
//! failure, 2 on command-line usage errors.

mod commands;
mod config;
mod report;

use clap::{Parser, Subcommand};
use commands::{bench, plan, sequential, train, verify};
use kron_lora::{Error, Result};
use report::RunManifest;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "kronlora",
    version,
    about = "Adapters on frozen linear layers: plain low-rank, pure Kronecker, and the \
             Kronecker-times-low-rank hybrid."
)]
struct Cli {
    /// Root seed for everything stochastic in the run.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Directory reports and checkpoints are written into.
    #[arg(long, global = true, default_value = "kronlora_out")]
    out: PathBuf,
    /// Print the JSON report to stdout instead of the text summary.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the randomized correctness suites.
    Verify(verify::VerifyArgs),
    /// Size every adapter family for one layer.
    Plan(plan::PlanArgs),
    /// Micro-benchmark adapter forward/backward throughput.
    Bench(bench::BenchArgs),
    /// Train one adapter on a toy task from a TOML config.
    Train(train::TrainArgs),
    /// Two-task sequential protocol from a TOML config, across arms.
    Sequential(sequential::SequentialArgs),
}

fn echo<T: serde::Serialize>(v: &T) -> Result<serde_json::Value> {
    serde_json::to_value(v).map_err(|e| Error::Format(format!("config echo: {e}")))
}

/// Returns whether the command succeeded (only `verify` can complete and
/// still report failure).
fn dispatch(cli: &Cli) -> Result<bool> {
    // Checkpoints can be written before the report, so the output directory
    // must exist before any command runs.
    std::fs::create_dir_all(&cli.out).map_err(|e| Error::Io {
        path: cli.out.display().to_string(),
        source: e,
    })?;
    match &cli.command {
        Command::Verify(args) => {
            let payload = verify::run(args, cli.seed)?;
            let manifest = RunManifest::new(cli.seed, echo(args)?);
            report::write(&cli.out, "verify", &manifest, &payload, cli.json)?;
            if !cli.json {
                verify::print_summary(&payload);
            }
            Ok(payload.all_passed)
        }
        Command::Plan(args) => {
            let payload = plan::run(args)?;
            let manifest = RunManifest::new(cli.seed, echo(args)?);
            report::write(&cli.out, "plan", &manifest, &payload, cli.json)?;
            if !cli.json {
                plan::print_summary(&payload);
            }
            Ok(true)
        }
        Command::Bench(args) => {
            let payload = bench::run(args, cli.seed, &cli.out)?;
            let manifest = RunManifest::new(cli.seed, echo(args)?);
            report::write(&cli.out, "bench", &manifest, &payload, cli.json)?;
            if !cli.json {
                bench::print_summary(&payload);
            }
            Ok(true)
        }
        Command::Train(args) => {
            let (payload, file) = train::run(args, cli.seed, &cli.out)?;
            let manifest = RunManifest::new(cli.seed, echo(&file)?);
            report::write(&cli.out, "train", &manifest, &payload, cli.json)?;
            if !cli.json {
                train::print_summary(&payload);
            }
            Ok(true)
        }
        Command::Sequential(args) => {
            let (payload, file) = sequential::run(args, cli.seed, &cli.out)?;
            let manifest = RunManifest::new(cli.seed, echo(&file)?);
            report::write(&cli.out, "sequential", &manifest, &payload, cli.json)?;
            if !cli.json {
                sequential::print_summary(&payload);
            }
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
