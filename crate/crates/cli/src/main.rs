//! `acsdet` command line: synthetic data generation, training, evaluation,
//! ablations, and embedding dumps.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

mod commands;
mod config;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "acsdet",
    version,
    about = "One-class audio anti-spoofing toolkit",
    propagate_version = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-system dataset directory
    GenData(commands::GenDataArgs),
    /// Train a detector and persist model, logs and resolved config
    Train(commands::TrainArgs),
    /// Score a split, write a score file, print EER (and min t-DCF)
    Eval(commands::EvalArgs),
    /// Train and evaluate every value on one ablation axis over several seeds
    Ablate(commands::AblateArgs),
    /// Write utterance embeddings to CSV for external projection
    DumpEmbeddings(commands::DumpArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(args) => commands::gen_data(args),
        Command::Train(args) => commands::train(args),
        Command::Eval(args) => commands::eval(args),
        Command::Ablate(args) => commands::ablate(args),
        Command::DumpEmbeddings(args) => commands::dump_embeddings(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}
