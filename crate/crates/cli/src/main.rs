use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};

use dynpset_core::harness::{generator, replay_text, run_scenario, Scenario};

#[derive(Parser)]
#[command(name = "dynpset")]
#[command(about = "Simulate dynamic process-set resource management")]
#[command(version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and write its trace and metrics
    Run {
        scenario: PathBuf,
        /// Trace output (default: stdout)
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Metrics JSON output
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Override the scenario seed
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Check a scenario file without running it
    Validate { scenario: PathBuf },
    /// Re-check every invariant against a recorded trace
    Replay { trace: PathBuf },
    /// Print a synthetic scenario
    Gen {
        #[arg(long)]
        jobs: usize,
        #[arg(long)]
        seed: u64,
        /// Output file (default: stdout)
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
}

/// Failure classes mapped onto exit codes.
enum Failure {
    /// Validation or replay failed: exit 1.
    Check(anyhow::Error),
    /// Bad invocation or unreadable input: exit 2.
    Usage(anyhow::Error),
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Usage(e.into())
    }
}

fn read(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path)
        .with_context(|| format!("cannot read {}", path.display()))
        .map_err(Failure::Usage)
}

fn write_or_print(path: Option<&Path>, text: &str) -> Result<(), Failure> {
    match path {
        Some(p) => fs::write(p, text)
            .with_context(|| format!("cannot write {}", p.display()))
            .map_err(Failure::Usage),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn load(path: &Path) -> Result<Scenario, Failure> {
    let text = read(path)?;
    Scenario::from_toml(&text)
        .with_context(|| path.display().to_string())
        .map_err(Failure::Check)
}

fn execute(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Run {
            scenario,
            trace,
            metrics,
            seed,
        } => {
            let mut sc = load(&scenario)?;
            if let Some(seed) = seed {
                sc.seed = seed;
            }
            let out = run_scenario(&sc).map_err(|e| Failure::Check(e.into()))?;
            write_or_print(trace.as_deref(), &out.trace.to_text())?;
            if let Some(path) = metrics {
                write_or_print(Some(&path), &out.metrics.to_json())?;
            }
            eprintln!(
                "{} ticks, mean utilization {:.4}",
                out.metrics.ticks, out.metrics.mean_utilization
            );
        }
        Command::Validate { scenario } => {
            let sc = load(&scenario)?;
            println!("ok: {} job(s), horizon {}", sc.jobs.len(), sc.horizon);
        }
        Command::Replay { trace } => {
            let text = read(&trace)?;
            let report = replay_text(&text)
                .map_err(|e| Failure::Check(anyhow::anyhow!("malformed trace: {e}")))?;
            println!("{report}");
            if !report.is_pass() {
                return Err(Failure::Check(anyhow::anyhow!("replay failed")));
            }
        }
        Command::Gen { jobs, seed, out } => {
            let sc = generator::generate(jobs, seed);
            write_or_print(out.as_deref(), &sc.to_toml())?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Check(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
