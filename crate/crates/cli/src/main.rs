//! `kvedit`: erase concepts from the cross-attention projections of a
//! diffusion checkpoint.
//!
//! Exit status: 0 ok, 1 usage, 2 data or format error, 3 numerical failure,
//! 4 verification failure.

mod commands;
mod config;
mod error;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use crate::config::{PatternArgs, RunArgs};

#[derive(Parser)]
#[command(name = "kvedit", version, about = "Closed-form concept erasure for cross-attention K/V projections")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Erase concepts, writing the edited checkpoint, snapshots and a report.
    Edit(RunArgs),
    /// Derive the embeddings that regenerate erased concepts in an edited
    /// checkpoint.
    Derive(RunArgs),
    /// Run the randomized certification suite.
    Verify {
        #[arg(long, default_value_t = 200)]
        cases: usize,
        #[arg(long, default_value_t = 0x5eed)]
        seed: u64,
        /// Perturb the closed forms; the suite must then fail.
        #[arg(long)]
        inject_fault: bool,
    },
    /// Recompute the drift bound chain between consecutive snapshots.
    Bounds(RunArgs),
    /// Parameter counts of a checkpoint and of its selected matrices.
    Info {
        checkpoint: PathBuf,
        #[command(flatten)]
        selection: PatternArgs,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let result = match cli.command {
        Command::Edit(args) => commands::edit(args),
        Command::Derive(args) => commands::derive(args),
        Command::Verify {
            cases,
            seed,
            inject_fault,
        } => commands::verify(cases, seed, inject_fault),
        Command::Bounds(args) => commands::bounds(args),
        Command::Info { checkpoint, selection } => commands::info(&checkpoint, &selection),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
