//! `netclus` command-line front end.

mod commands;
mod config;
mod plot;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

/// Exit status for configuration, usage and input-file errors.
const EXIT_CONFIG: u8 = 2;
/// Exit status for other runtime failures.
const EXIT_RUNTIME: u8 = 1;
/// Exit status when inference finished but some flows errored.
const EXIT_PARTIAL: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "netclus", version, about = "Clustering-accelerated traffic classification")]
struct Cli {
    /// Seed for every stochastic step (falls back to NETCLUS_SEED, then the config).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads (default: available cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Write the JSON summary here instead of stdout.
    #[arg(long, global = true, value_name = "FILE")]
    summary: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    Gen(commands::gen::Args),
    /// Train a student with the clustering-friendly objective.
    TrainCfe(commands::train::CfeArgs),
    /// Train a student against recorded teacher outputs.
    Distill(commands::train::DistillArgs),
    /// Cluster student embeddings and report purity.
    Cluster(commands::cluster::Args),
    /// Hybrid inference with ASI routing.
    Infer(commands::infer::Args),
    /// Sweep one routing threshold.
    Sweep(commands::infer::SweepArgs),
    /// Clustering scaling and hybrid speedup measurements.
    Bench(commands::bench::Args),
    /// Score a decisions file against ground truth.
    Eval(commands::eval::Args),
}

/// How a command finished when it did not fail outright.
pub enum Outcome {
    Ok,
    Partial,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let config_like = err.chain().any(|e| {
        if let Some(core) = e.downcast_ref::<netclus::Error>() {
            use netclus::Error::*;
            return matches!(
                core,
                Config(_)
                    | Io { .. }
                    | Parse { .. }
                    | Json(_)
                    | ModelVersion { .. }
                    | CorruptModel(_)
                    | DimensionMismatch { .. }
                    | MissingTeacher(_)
                    | DuplicateId(_)
                    | UnknownId(_)
                    | LabelOutOfRange { .. }
            );
        }
        e.is::<config::ConfigError>() || e.is::<toml::de::Error>() || e.is::<std::io::Error>()
    });
    if config_like {
        EXIT_CONFIG
    } else {
        EXIT_RUNTIME
    }
}

fn run(cli: Cli) -> anyhow::Result<Outcome> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| config::ConfigError(format!("--threads: {e}")))?;
    }
    let seed = config::resolve_seed(cli.seed)?;
    let out = report::Sink::new(cli.summary);
    match cli.command {
        Command::Gen(a) => commands::gen::run(a, seed, &out),
        Command::TrainCfe(a) => commands::train::run_cfe(a, seed, &out),
        Command::Distill(a) => commands::train::run_distill(a, seed, &out),
        Command::Cluster(a) => commands::cluster::run(a, seed, &out),
        Command::Infer(a) => commands::infer::run(a, seed, &out),
        Command::Sweep(a) => commands::infer::run_sweep(a, seed, &out),
        Command::Bench(a) => commands::bench::run(a, seed, &out),
        Command::Eval(a) => commands::eval::run(a, &out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::Partial) => ExitCode::from(EXIT_PARTIAL),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
