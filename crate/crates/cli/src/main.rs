//! `sps`: simulate, optimize and sweep the feedback-controlled single-photon
//! source, and regenerate the emission-probability figures.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use sps_feedback::optimize::Mode;

use config::{Format, RunConfig};

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, configuration or output path; exit code 2.
    Config(String),
    /// The computation itself failed; exit code 3.
    Numeric(String),
}

impl From<sps_feedback::Error> for CliError {
    fn from(e: sps_feedback::Error) -> Self {
        match e {
            sps_feedback::Error::InvalidArgument(_) => CliError::Config(e.to_string()),
            other => CliError::Numeric(other.to_string()),
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ModeArg {
    Det,
    Threshold,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Det => Mode::Deterministic,
            ModeArg::Threshold => Mode::Threshold,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Evolve one protocol and write its trajectory and asymptotic statistics.
    Simulate,
    /// Optimize the stopping time (and feedback settings) at one parameter point.
    Optimize,
    /// Optimize over a grid of pump rates and couplings.
    Sweep,
    /// Regenerate figure 3, 4 or 5 with a comparison against the reference curves.
    Figure,
}

#[derive(Debug, Parser)]
#[command(name = "sps", version, about)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// TOML configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    pub format: Option<Format>,
    /// RK4 step.
    #[arg(long, global = true)]
    pub dt: Option<f64>,
    /// Cap on the two-or-more photon probability.
    #[arg(long, global = true)]
    pub epsilon: Option<f64>,
    /// Measurement rate; fixes the searched set to this value.
    #[arg(long, global = true)]
    pub gamma: Option<f64>,
    /// Switch-off rate with the dot excited; fixes the searched grid to this value.
    #[arg(long, global = true)]
    pub nu1: Option<f64>,
    /// Stopping time for simulate; upper end of the stopping-time grid otherwise.
    #[arg(long, global = true)]
    pub ts: Option<f64>,
    #[arg(long, global = true, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long, global = true)]
    pub figure: Option<u8>,
    #[arg(long, global = true)]
    pub workers: Option<usize>,
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let cfg = RunConfig::resolve(cli)?;
    match cli.command {
        Command::Simulate => commands::simulate(&cfg),
        Command::Optimize => commands::optimize(&cfg),
        Command::Sweep => commands::sweep(&cfg),
        Command::Figure => commands::figure(&cfg),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Numeric(msg)) => {
            eprintln!("numeric failure: {msg}");
            ExitCode::from(3)
        }
    }
}
