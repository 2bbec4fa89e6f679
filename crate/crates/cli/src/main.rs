//! `agdh`: run simulated key-agreement scenarios and micro-benchmarks.

mod bench;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "agdh", version, about = "Asymmetric group Diffie-Hellman simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate a group and audit every key it derives.
    Run(RunArgs),
    /// Time blindings and leader batch finalization.
    Bench(BenchArgs),
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum MetricsFormat {
    Text,
}

#[derive(Args, Debug, Clone)]
pub struct RunArgs {
    /// Nodes started at time zero.
    #[arg(long, default_value_t = 10)]
    pub nodes: u32,
    /// Independent per-receiver loss probability.
    #[arg(long, default_value_t = 0.0)]
    pub loss: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Simulated time budget, e.g. `120s` or `5m`.
    #[arg(long, default_value = "120s", value_parser = parse_duration)]
    pub duration: Duration,
    /// Scenario file with timed joins, leaves, partitions and heals.
    #[arg(long)]
    pub scenario: Option<PathBuf>,
    /// Directory for transcript, metrics and audit files.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Rekey as soon as a contribution arrives.
    #[arg(long)]
    pub eager_rekey: bool,
    /// Use the p=23 toy group.
    #[arg(long, conflicts_with = "prod")]
    pub toy: bool,
    /// Use the 1024-bit production group (default).
    #[arg(long)]
    pub prod: bool,
    #[arg(long, value_enum, default_value_t = MetricsFormat::Text)]
    pub metrics_format: MetricsFormat,
    /// Run this many consecutive seeds in parallel.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    pub repeat: u64,
}

#[derive(Args, Debug, Clone)]
pub struct BenchArgs {
    /// Contributions per leader batch.
    #[arg(long, default_value_t = 50)]
    pub members: usize,
    /// Blindings timed per group.
    #[arg(long, default_value_t = 200)]
    pub iterations: u32,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
}

fn parse_duration(s: &str) -> Result<Duration, String> {
    agdh::time::parse_duration(s).ok_or_else(|| format!("invalid duration {s:?} (expected e.g. 120s, 500ms, 5m)"))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run(args) => run::main(&args),
        Command::Bench(args) => {
            print!("{}", bench::run(&args));
            ExitCode::SUCCESS
        }
    }
}
