use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fogsim::sim::SimulationConfig;

mod commands;
mod sweep;

#[derive(Parser)]
#[command(name = "fogsim", version, about = "Multi-layer fog learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one simulation and write metrics.csv, events.log and summary.txt.
    Run(RunArgs),
    /// Run the configuration next to the star and centralized baselines.
    Compare(RunArgs),
    /// Run a grid over one configuration key and several seeds.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct RunArgs {
    /// JSON configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the seed in the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, created if missing.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    config: PathBuf,
    /// Dotted configuration key, e.g. `consensus.rounds`.
    #[arg(long)]
    param: String,
    /// Comma-separated values; each is read as JSON, falling back to a string.
    #[arg(long, value_delimiter = ',', num_args = 0..)]
    values: Vec<String>,
    /// Comma-separated seeds. Defaults to the configuration's seed.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    #[arg(long)]
    out: PathBuf,
    /// Number of simulations to run at once.
    #[arg(long, default_value_t = 1)]
    parallel: usize,
}

/// A command failure and the exit code it maps to.
#[derive(Debug)]
pub enum Failure {
    /// Bad input: unreadable or invalid configuration, unknown sweep key.
    Config(String),
    /// The simulation or file output failed.
    Runtime(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Runtime(_) => 1,
        }
    }
}

pub fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::Runtime(format!("{}: {e}", path.display()))
}

/// Reads and validates a configuration, reporting every violation at once.
pub fn load_config(path: &Path, seed: Option<u64>) -> Result<SimulationConfig, Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::Config(format!("cannot read {}: {e}", path.display())))?;
    let mut config = SimulationConfig::from_json(&text)
        .map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
    if let Some(seed) = seed {
        config.seed = seed;
    }
    check(&config)?;
    Ok(config)
}

pub fn check(config: &SimulationConfig) -> Result<(), Failure> {
    let violations = config.validate();
    if violations.is_empty() {
        return Ok(());
    }
    let lines: Vec<String> = violations.iter().map(|v| format!("  {v}")).collect();
    Err(Failure::Config(format!(
        "invalid configuration:\n{}",
        lines.join("\n")
    )))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => commands::run(&a.config, a.seed, &a.out),
        Command::Compare(a) => commands::compare(&a.config, a.seed, &a.out),
        Command::Sweep(a) => sweep::sweep(&sweep::SweepRequest {
            config: &a.config,
            param: &a.param,
            values: &a.values,
            seeds: &a.seeds,
            out: &a.out,
            parallel: a.parallel,
        }),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Config(m) | Failure::Runtime(m) => eprintln!("fogsim: {m}"),
            }
            ExitCode::from(f.code())
        }
    }
}
