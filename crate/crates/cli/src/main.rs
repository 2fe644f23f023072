//! `subdiff`: batch experiment runner.
//!
//! Exit codes: 0 success, 1 usage, 2 invalid input, 3 numerical failure.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;
mod output;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{ExperimentConfig, Overrides};

#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Numerical(String),
    Io(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Validation(_) | CliError::Io(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Validation(m) => write!(f, "invalid configuration: {m}"),
            CliError::Numerical(m) => write!(f, "numerical failure: {m}"),
            CliError::Io(m) => write!(f, "cannot write output: {m}"),
        }
    }
}

impl From<subdiff::Error> for CliError {
    fn from(e: subdiff::Error) -> Self {
        commands::classify(e)
    }
}

#[derive(Parser)]
#[command(name = "subdiff", version, about = "Stochastic control experiments driven by sub-diffusions")]
struct Cli {
    /// TOML file of dotted keys, e.g. `subordinator.kappa = 1.0`.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `master_seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides `output`.
    #[arg(long, global = true)]
    out: Option<String>,
    /// Overrides `n_paths`.
    #[arg(long, global = true)]
    paths: Option<usize>,
    /// No progress messages on stderr.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Sample subordinator skeletons and their inverses on the grid.
    SimulateSubordinator,
    /// Sample the time-changed Brownian driver.
    SimulateSubdiffusion,
    /// Euler integration of the controlled state under the configured policy.
    IntegrateForward,
    /// Picard solve of the first adjoint equation with iteration diagnostics.
    SolveBsde,
    /// First and second adjoints along the configured policy.
    SolveAdjoints,
    /// Maximum-principle residual scans and the sufficiency check.
    CheckSmp,
    /// Convex and spike variation studies.
    VariationStudy,
    /// Closed-form LQ example against the simulated adjoint.
    LqDemo,
    /// Renewal density estimates next to the closed form where known.
    RenewalDensity,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::SimulateSubordinator => "simulate-subordinator",
            Command::SimulateSubdiffusion => "simulate-subdiffusion",
            Command::IntegrateForward => "integrate-forward",
            Command::SolveBsde => "solve-bsde",
            Command::SolveAdjoints => "solve-adjoints",
            Command::CheckSmp => "check-smp",
            Command::VariationStudy => "variation-study",
            Command::LqDemo => "lq-demo",
            Command::RenewalDensity => "renewal-density",
        }
    }
}

fn threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("SUBDIFF_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| CliError::Validation(format!("SUBDIFF_THREADS: expected a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Validation(format!("SUBDIFF_THREADS: {e}")))
}

fn execute(cli: &Cli) -> Result<(), CliError> {
    threads()?;
    let text = match &cli.config {
        Some(path) => std::fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("config: cannot read {}: {e}", path.display())))?,
        None => String::new(),
    };
    let ov = Overrides { seed: cli.seed, paths: cli.paths, out: cli.out.clone() };
    let cfg = ExperimentConfig::parse(&text, &ov)?;
    let mut run = output::Run::start(&cfg, cli.command.name(), cli.quiet)?;
    run.note(format!("config hash {}", run.hash));
    match cli.command {
        Command::SimulateSubordinator => commands::simulate_subordinator(&cfg, &mut run)?,
        Command::SimulateSubdiffusion => commands::simulate_subdiffusion(&cfg, &mut run)?,
        Command::IntegrateForward => commands::integrate_forward(&cfg, &mut run)?,
        Command::SolveBsde => commands::solve_bsde(&cfg, &mut run)?,
        Command::SolveAdjoints => commands::solve_adjoints(&cfg, &mut run)?,
        Command::CheckSmp => commands::check_smp(&cfg, &mut run)?,
        Command::VariationStudy => commands::variation_study(&cfg, &mut run)?,
        Command::LqDemo => commands::lq_demo(&cfg, &mut run)?,
        Command::RenewalDensity => commands::renewal_density(&cfg, &mut run)?,
    }
    run.finish()?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("subdiff {}: {e}", cli.command.name());
            ExitCode::from(e.code())
        }
    }
}
