//! Subcommand bodies: load a configuration, run the pipeline, write outputs.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde_json::json;
use tpl_core::config::RunConfig;
use tpl_core::io::{to_json, trajectory_to_csv, write_file};
use tpl_core::pipeline::{
    run_analyze, run_check, run_solve, run_static, run_turnpike, trajectory_plots, turnpike_plots, SolveReport,
    StaticReport,
};
use tpl_core::Error;

use crate::RunArgs;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Static,
    Analyze,
    Solve,
    Turnpike,
    Check,
}

impl Kind {
    fn name(self) -> &'static str {
        match self {
            Kind::Static => "static",
            Kind::Analyze => "analyze",
            Kind::Solve => "solve",
            Kind::Turnpike => "turnpike",
            Kind::Check => "check",
        }
    }
}

/// One configuration to run and the directory its outputs go to.
struct Job {
    config: PathBuf,
    out: Option<PathBuf>,
}

/// With several configurations every run gets its own subdirectory named
/// after the config file.
fn plan(args: &RunArgs) -> Vec<Job> {
    if args.config.len() == 1 {
        return vec![Job {
            config: args.config[0].clone(),
            out: args.out.clone(),
        }];
    }
    let mut seen: HashMap<String, usize> = HashMap::new();
    args.config
        .iter()
        .map(|path| {
            let stem = path
                .file_stem()
                .map_or_else(|| "run".to_string(), |s| s.to_string_lossy().into_owned());
            let count = seen.entry(stem.clone()).or_insert(0);
            *count += 1;
            let name = if *count == 1 { stem } else { format!("{stem}_{count}") };
            let base = args.out.clone().unwrap_or_else(|| PathBuf::from("out"));
            Job {
                config: path.clone(),
                out: Some(base.join(name)),
            }
        })
        .collect()
}

/// Runs every configuration and returns the largest exit code.
pub fn run_all(kind: Kind, args: &RunArgs) -> i32 {
    let jobs = plan(args);
    let workers = (args.jobs as usize).min(jobs.len()).max(1);
    let next = AtomicUsize::new(0);
    let codes = Mutex::new(vec![0; jobs.len()]);
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(job) = jobs.get(i) else { break };
                let code = run_one(kind, args, job);
                codes.lock().expect("no worker panics while holding the lock")[i] = code;
            });
        }
    });
    let codes = codes.into_inner().expect("workers finished");
    codes.into_iter().max().unwrap_or(0)
}

fn load(args: &RunArgs, job: &Job) -> Result<RunConfig, Error> {
    let mut cfg = RunConfig::from_path(&job.config)?;
    if let Some(out) = &job.out {
        cfg.output.dir = out.clone();
    }
    cfg.output.svg |= args.svg;
    if let Some(seed) = args.seed {
        cfg.output.seed = seed;
    }
    Ok(cfg)
}

fn run_one(kind: Kind, args: &RunArgs, job: &Job) -> i32 {
    let cfg = match load(args, job) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("{}: {e}", job.config.display());
            return e.exit_code();
        }
    };
    log::info!(
        "{} {} -> {}",
        kind.name(),
        job.config.display(),
        cfg.output.dir.display()
    );
    let result = match kind {
        Kind::Static => cmd_static(&cfg),
        Kind::Analyze => cmd_analyze(&cfg),
        Kind::Solve => cmd_solve(&cfg),
        Kind::Turnpike => cmd_turnpike(&cfg),
        Kind::Check => cmd_check(&cfg),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("{}: {e}", job.config.display());
            let diag = json!({
                "command": kind.name(),
                "problem": cfg.problem.name(),
                "error": e.to_string(),
                "exit_code": e.exit_code(),
            });
            if let Ok(text) = to_json(&diag) {
                if let Err(w) = write_file(&cfg.output.dir, "error.json", &text) {
                    eprintln!("cannot write error.json: {w}");
                }
            }
            e.exit_code()
        }
    }
}

fn out_dir(cfg: &RunConfig) -> &Path {
    &cfg.output.dir
}

fn cmd_static(cfg: &RunConfig) -> Result<i32, Error> {
    let st = run_static(cfg)?;
    let text = to_json(&StaticReport::new(cfg.problem, &st.sol))?;
    write_file(out_dir(cfg), "static.json", &text)?;
    print!("{text}");
    Ok(0)
}

fn cmd_analyze(cfg: &RunConfig) -> Result<i32, Error> {
    let report = run_analyze(cfg)?;
    let text = to_json(&report)?;
    write_file(out_dir(cfg), "certification.json", &text)?;
    match &report.certification {
        Some(c) => println!(
            "{}: hyperbolic = {}, mu = {:?}, zero eigenvalues = {}, kalman rank = {}/{}",
            cfg.problem.name(),
            c.hyperbolic,
            c.mu,
            c.zero_count,
            c.kalman_rank,
            c.state_dim
        ),
        None => println!(
            "{}: {}",
            cfg.problem.name(),
            report.message.as_deref().unwrap_or("certification failed")
        ),
    }
    Ok(0)
}

fn cmd_solve(cfg: &RunConfig) -> Result<i32, Error> {
    let run = run_solve(cfg)?;
    let report = SolveReport::new(cfg.problem, &run);
    let dir = out_dir(cfg);
    write_file(dir, "solve.json", &to_json(&report)?)?;
    if !run.result.trajectory.controls.is_empty() {
        write_file(dir, "trajectory.csv", &trajectory_to_csv(&run.result.trajectory)?)?;
        if cfg.output.svg {
            for (name, svg) in trajectory_plots(cfg.problem, &run.result.trajectory, &run.static_sol) {
                write_file(dir, &name, &svg)?;
            }
        }
    }
    println!(
        "{}: status = {:?}, cost = {}, |grad| = {:.3e}, |c| = {:.3e}, pmp residual = {:?}",
        cfg.problem.name(),
        report.status,
        report.cost,
        report.stationarity,
        report.constraint_violation,
        report.pmp_residual
    );
    Ok(run.result.status.exit_code())
}

fn cmd_turnpike(cfg: &RunConfig) -> Result<i32, Error> {
    let run = run_turnpike(cfg);
    let dir = out_dir(cfg);
    write_file(dir, "turnpike.json", &to_json(&run.report)?)?;
    if let Some(s) = &run.solve {
        if !s.result.trajectory.controls.is_empty() {
            write_file(dir, "trajectory.csv", &trajectory_to_csv(&s.result.trajectory)?)?;
        }
    }
    if let Some(dev) = &run.deviation {
        write_file(dir, "deviation.csv", &dev.to_csv()?)?;
    }
    if cfg.output.svg {
        for (name, svg) in turnpike_plots(cfg.problem, &run) {
            write_file(dir, &name, &svg)?;
        }
    }
    let r = &run.report;
    match (&r.failed_stage, &r.error) {
        (Some(stage), Some(err)) => eprintln!("{}: stage {stage:?} failed: {err}", cfg.problem.name()),
        _ => println!(
            "{}: verdict = {:?}, mu = {:?}, mu_hat = {:?}, plateau = {:?} (state/control {:?}), tol = {:e}",
            cfg.problem.name(),
            r.verdict,
            r.mu_certified,
            r.mu_hat,
            r.plateau,
            r.plateau_state_control,
            r.plateau_tol
        ),
    }
    Ok(run.exit_code())
}

fn cmd_check(cfg: &RunConfig) -> Result<i32, Error> {
    let report = run_check(cfg)?;
    write_file(out_dir(cfg), "check.json", &to_json(&report)?)?;
    for c in &report.checks {
        println!(
            "{} {:<28} value = {:.3e} tol = {:.1e} {}",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.value,
            c.tolerance,
            c.detail
        );
    }
    Ok(if report.passed { 0 } else { 1 })
}
