// SPDX-License-Identifier: MIT OR Apache-2.0

use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use patchlens::{build_dataset, run_experiment, run_sanity, write_report, RunArgs, RunOptions};

#[derive(Debug, Parser)]
#[command(name = "patchlens", version, about = "Activation patching experiments on a DistilBERT bi-encoder")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Retrieve, select queries, perturb and score into a dataset
    BuildDataset {
        #[command(flatten)]
        args: RunArgs,
    },
    /// Patch every triple of a dataset at the requested sites
    Run {
        #[command(flatten)]
        args: RunArgs,
        /// Continue an interrupted run from its checkpoint
        #[arg(long)]
        resume: bool,
        /// Stop after this many triples, keeping the checkpoint
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Aggregate a finished run into heatmaps
    Report {
        #[command(flatten)]
        args: RunArgs,
    },
    /// Run correctness controls on a model
    Sanity {
        #[command(flatten)]
        args: RunArgs,
    },
}

fn execute(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::BuildDataset { args } => {
            let cfg = args.resolve()?;
            let m = build_dataset(&cfg)?;
            println!(
                "{} triples from {} queries written to {}",
                m.triples,
                m.selected_queries.len(),
                cfg.dataset.display()
            );
        }
        Command::Run { args, resume, stop_after } => {
            let cfg = args.resolve()?;
            let s = run_experiment(&cfg, RunOptions { resume, stop_after })?;
            if s.finished {
                println!(
                    "{} triples patched, {} skipped as degenerate, {} failed; results in {}",
                    s.completed,
                    s.skipped_degenerate,
                    s.errored,
                    cfg.output_dir.display()
                );
            } else {
                println!("stopped after {} triples; continue with --resume", s.computed);
            }
            return Ok(s.errored == 0);
        }
        Command::Report { args } => {
            let cfg = args.resolve()?;
            let dir = write_report(&cfg)?;
            println!("report written to {}", dir.display());
        }
        Command::Sanity { args } => {
            let cfg = args.resolve()?;
            let controls = run_sanity(&cfg)?;
            for c in &controls {
                println!("{c}");
            }
            return Ok(controls.iter().all(|c| c.pass));
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match execute(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
