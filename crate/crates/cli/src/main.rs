//! `tpl`: command-line front end for the turnpike laboratory.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(
    name = "tpl",
    version,
    about = "Turnpike analysis of symmetry-reduced optimal control problems"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Solve the static problem and report (ȳ, ū, p̄_y).
    Static(RunArgs),
    /// Certify the turnpike hypotheses at the static point.
    Analyze(RunArgs),
    /// Solve the reduced OCP and write the trajectory.
    Solve(RunArgs),
    /// Full pipeline: static, certify, solve, reconstruct, anchor, fit.
    Turnpike(RunArgs),
    /// Run the invariant and oracle checks for the configured problem.
    Check(RunArgs),
}

#[derive(Debug, Args, Clone)]
pub struct RunArgs {
    /// Run configuration (JSON); repeat to run several configurations.
    #[arg(long, required = true)]
    config: Vec<PathBuf>,
    /// Output directory, overriding `output.dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write SVG plots.
    #[arg(long)]
    svg: bool,
    /// Seed for randomised checks, overriding `output.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Number of configurations run concurrently.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..))]
    jobs: u32,
}

fn init_logging() -> Result<(), String> {
    let level = match std::env::var("TPL_LOG").as_deref() {
        Err(_) | Ok("") => log::LevelFilter::Warn,
        Ok("off") => log::LevelFilter::Off,
        Ok("info") => log::LevelFilter::Info,
        Ok("debug") => log::LevelFilter::Debug,
        Ok(other) => return Err(format!("TPL_LOG must be off, info or debug, got `{other}`")),
    };
    env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .target(env_logger::Target::Stderr)
        .init();
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(msg) = init_logging() {
        eprintln!("error: {msg}");
        return ExitCode::from(2);
    }
    let (kind, args) = match cli.command {
        Command::Static(a) => (commands::Kind::Static, a),
        Command::Analyze(a) => (commands::Kind::Analyze, a),
        Command::Solve(a) => (commands::Kind::Solve, a),
        Command::Turnpike(a) => (commands::Kind::Turnpike, a),
        Command::Check(a) => (commands::Kind::Check, a),
    };
    let code = commands::run_all(kind, &args);
    ExitCode::from(u8::try_from(code).unwrap_or(1))
}
