//! End-to-end runs behind the command-line front end: static point,
//! certification, solve, turnpike analysis and the invariant checks.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{Problem, RunConfig};
use crate::error::{Error, Result};
use crate::integrator::{reconstruct_group, rollout, ControlGrid, Trajectory};
use crate::io::{columns_to_csv, parse_trajectory_csv, trajectory_to_csv};
use crate::lie::{body_diagonal, GroupElement};
use crate::ocp::{gradient_oracle, pmp_residual, solve, OuterRecord, SolveResult, SolveStatus};
use crate::static_solver::{anchor_static_family, solve_static, static_bruteforce_oracle, SearchBox, StaticSolution};
use crate::svg::{render, Plot, Series};
use crate::systems::{
    equivariance_check, jacobian_self_test, Kepler, KeplerFull, ReducedOcp, RigidBody, RigidBodyFull,
};
use crate::turnpike::{
    anchor_trim, certify, deviation_series, fit_envelope_in, kepler_full_pmp_field, kepler_lift, reduced_pmp_field,
    symmetry_zero_eigen_test, EnvelopeFit, HyperbolicityReport,
};

/// Pass threshold for the attitude deviation from the anchored trim.
pub const ATTITUDE_TOL: f64 = 0.05;
/// Required decay of the group deviation on `[0.3T, 0.7T]` relative to `t = 0`.
pub const GROUP_DECAY: f64 = 10.0;
/// Minimum fit quality for a positive turnpike verdict.
pub const MIN_R_SQUARED: f64 = 0.9;

fn vec_of(v: &DVector<f64>) -> Vec<f64> {
    v.iter().copied().collect()
}

pub fn state_names(problem: Problem) -> Vec<&'static str> {
    match problem {
        Problem::Kepler => vec!["s", "v_s", "v_theta"],
        Problem::RigidBody => vec!["Omega_1", "Omega_2", "Omega_3"],
        Problem::Rotors => vec!["Omega_1", "Omega_2", "Omega_3", "v_theta1", "v_theta2", "v_theta3"],
    }
}

// ---------------------------------------------------------------------------
// Static point and certification

#[derive(Debug, Clone, Serialize)]
pub struct StaticReport {
    pub problem: Problem,
    pub y_bar: Vec<f64>,
    pub u_bar: Vec<f64>,
    pub p_bar: Vec<f64>,
    pub residual_dyn: f64,
    pub residual_kkt: f64,
    pub iterations: usize,
    pub kkt_condition: f64,
}

impl StaticReport {
    pub fn new(problem: Problem, sol: &StaticSolution) -> Self {
        Self {
            problem,
            y_bar: vec_of(&sol.y_bar),
            u_bar: vec_of(&sol.u_bar),
            p_bar: vec_of(&sol.p_bar),
            residual_dyn: sol.residual_dyn,
            residual_kkt: sol.residual_kkt,
            iterations: sol.iterations,
            kkt_condition: sol.kkt_condition,
        }
    }
}

pub struct StaticRun {
    pub ocp: ReducedOcp,
    pub sol: StaticSolution,
}

pub fn run_static(cfg: &RunConfig) -> Result<StaticRun> {
    let ocp = cfg.build_ocp()?;
    let sol = solve_static(ocp.system.as_ref(), &cfg.static_guess())?;
    Ok(StaticRun { ocp, sol })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AnalyzeStatus {
    Certified,
    /// `H_uu` is singular, so the linearised system cannot be formed.
    Hypothesis1Failed,
}

#[derive(Debug, Clone, Serialize)]
pub struct AnalyzeReport {
    pub problem: Problem,
    pub status: AnalyzeStatus,
    pub message: Option<String>,
    pub static_point: StaticReport,
    pub certification: Option<HyperbolicityReport>,
}

pub fn run_analyze(cfg: &RunConfig) -> Result<AnalyzeReport> {
    let st = run_static(cfg)?;
    let static_point = StaticReport::new(cfg.problem, &st.sol);
    match certify(st.ocp.system.as_ref(), &st.sol, cfg.analysis.zero_tol) {
        Ok(c) => Ok(AnalyzeReport {
            problem: cfg.problem,
            status: AnalyzeStatus::Certified,
            message: None,
            static_point,
            certification: Some(c.report),
        }),
        Err(e @ Error::SingularHuu) => Ok(AnalyzeReport {
            problem: cfg.problem,
            status: AnalyzeStatus::Hypothesis1Failed,
            message: Some(e.to_string()),
            static_point,
            certification: None,
        }),
        Err(e) => Err(e),
    }
}

// ---------------------------------------------------------------------------
// Solve

pub struct SolveRun {
    pub ocp: ReducedOcp,
    pub static_sol: StaticSolution,
    /// The trajectory carries the reconstructed group unless the solve diverged.
    pub result: SolveResult,
    pub pmp_residual: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SolveReport {
    pub problem: Problem,
    pub status: SolveStatus,
    pub message: String,
    pub cost: f64,
    pub stationarity: f64,
    pub constraint_violation: f64,
    pub pmp_residual: Option<f64>,
    pub descent_ok: bool,
    pub inner_iterations: usize,
    pub outer: Vec<OuterRecord>,
    pub multipliers: Vec<f64>,
    pub horizon: f64,
    pub intervals: usize,
    pub substeps: usize,
    /// Largest `| |q| − 1 |` over the reconstructed attitudes.
    pub quaternion_norm_error: Option<f64>,
}

/// Largest `| |q| − 1 |` along the group path; `None` without SO(3) factors.
pub fn quaternion_norm_error(traj: &Trajectory) -> Option<f64> {
    let g = traj.group.as_ref()?;
    g.first().filter(|e| !e.quaternions.is_empty()).map(|_| {
        g.iter()
            .flat_map(|e| e.quaternions.iter())
            .map(|q| (q.quaternion().norm() - 1.0).abs())
            .fold(0.0, f64::max)
    })
}

impl SolveReport {
    pub fn new(problem: Problem, run: &SolveRun) -> Self {
        let r = &run.result;
        Self {
            problem,
            status: r.status,
            message: r.message.clone(),
            cost: r.trajectory.cost,
            stationarity: r.stationarity,
            constraint_violation: r.constraint_violation,
            pmp_residual: run.pmp_residual,
            descent_ok: r.descent_ok,
            inner_iterations: r.inner_iterations(),
            outer: r.outer.clone(),
            multipliers: vec_of(&r.multipliers),
            horizon: run.ocp.horizon,
            intervals: r.trajectory.controls.len(),
            substeps: r.trajectory.substeps,
            quaternion_norm_error: quaternion_norm_error(&r.trajectory),
        }
    }
}

pub fn run_solve(cfg: &RunConfig) -> Result<SolveRun> {
    let StaticRun { ocp, sol } = run_static(cfg)?;
    solve_from_static(cfg, ocp, sol)
}

fn solve_from_static(cfg: &RunConfig, ocp: ReducedOcp, sol: StaticSolution) -> Result<SolveRun> {
    let mut result = solve(&ocp, &cfg.solver, Some(&sol))?;
    let mut pmp = None;
    if result.status != SolveStatus::Diverged {
        result.trajectory = reconstruct_group(&ocp, &result.trajectory)?;
        pmp = Some(pmp_residual(&ocp, &result)?);
    }
    Ok(SolveRun {
        ocp,
        static_sol: sol,
        result,
        pmp_residual: pmp,
    })
}

// ---------------------------------------------------------------------------
// Turnpike pipeline

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Static,
    Certify,
    Solve,
    Reconstruct,
    AnchorTrim,
    Deviation,
    Fit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Positive,
    Negative,
    /// The static point is not hyperbolic; only the fitted numbers are reported.
    NotClaimed,
    Failed,
}

#[derive(Debug, Clone, Serialize)]
pub struct GroupMetrics {
    pub at_start: f64,
    /// `max ε_grp` over `[0.3T, 0.7T]`.
    pub max_mid: f64,
    /// `max_mid < at_start / 10`.
    pub decayed: bool,
    /// `max ε_grp` over `[0.35T, 0.65T]`.
    pub max_attitude_window: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TurnpikeReport {
    pub problem: Problem,
    pub horizon: f64,
    pub intervals: usize,
    pub verdict: Verdict,
    pub failed_stage: Option<Stage>,
    pub error: Option<String>,
    pub static_point: Option<StaticReport>,
    /// Static point moved inside a degenerate solution family towards `y(T/2)`;
    /// present only when it differs from `static_point`.
    pub anchored_static: Option<StaticReport>,
    pub certification: Option<HyperbolicityReport>,
    pub solve: Option<SolveReport>,
    pub mu_certified: Option<f64>,
    pub mu_hat: Option<f64>,
    pub c_hat: Option<f64>,
    pub mu_ratio: Option<f64>,
    pub mu_within_factor_2: Option<bool>,
    /// Whether `ε_red` contains the adjoint term.
    pub adjoint_included: bool,
    pub plateau: Option<f64>,
    pub plateau_tol: f64,
    /// Plateau of `‖y − ȳ‖ + ‖u − ū‖` alone.
    pub plateau_state_control: Option<f64>,
    pub fit: Option<EnvelopeFit>,
    pub fit_state_control: Option<EnvelopeFit>,
    pub group: Option<GroupMetrics>,
}

#[derive(Debug, Clone)]
pub struct DeviationTable {
    pub times: Vec<f64>,
    pub eps_red: Vec<f64>,
    pub eps_yu: Vec<f64>,
    pub eps_grp: Option<Vec<f64>>,
    pub envelope: Vec<Option<f64>>,
}

impl DeviationTable {
    pub fn to_csv(&self) -> Result<String> {
        let wrap = |v: &[f64]| v.iter().map(|x| Some(*x)).collect::<Vec<_>>();
        let grp = match &self.eps_grp {
            Some(g) => wrap(g),
            None => vec![None; self.times.len()],
        };
        columns_to_csv(
            &["t", "eps_red", "eps_yu", "eps_grp", "envelope"],
            &[
                wrap(&self.times),
                wrap(&self.eps_red),
                wrap(&self.eps_yu),
                grp,
                self.envelope.clone(),
            ],
        )
    }
}

pub struct TurnpikeRun {
    pub report: TurnpikeReport,
    pub solve: Option<SolveRun>,
    /// Static point used for the deviations and the trim.
    pub anchored: Option<StaticSolution>,
    pub trim: Option<Vec<GroupElement>>,
    pub deviation: Option<DeviationTable>,
    pub failure: Option<Error>,
}

impl TurnpikeRun {
    /// Failure code of the halted stage, otherwise the solve status code.
    pub fn exit_code(&self) -> i32 {
        if let Some(e) = &self.failure {
            return e.exit_code();
        }
        self.solve.as_ref().map_or(0, |s| s.result.status.exit_code())
    }
}

fn window_max(times: &[f64], v: &[f64], lo: f64, hi: f64) -> f64 {
    let slack = 1e-9 * hi.abs().max(1.0);
    times
        .iter()
        .zip(v)
        .filter(|(t, _)| **t >= lo - slack && **t <= hi + slack)
        .map(|(_, e)| *e)
        .fold(0.0, f64::max)
}

/// Runs static → certify → solve → reconstruct → anchor → deviation → fit.
/// A failing stage halts the pipeline and is named in the report.
pub fn run_turnpike(cfg: &RunConfig) -> TurnpikeRun {
    let horizon = cfg.build_ocp().map(|o| o.horizon).unwrap_or(f64::NAN);
    let mut run = TurnpikeRun {
        report: TurnpikeReport {
            problem: cfg.problem,
            horizon,
            intervals: cfg.solver.intervals,
            verdict: Verdict::Failed,
            failed_stage: None,
            error: None,
            static_point: None,
            anchored_static: None,
            certification: None,
            solve: None,
            mu_certified: None,
            mu_hat: None,
            c_hat: None,
            mu_ratio: None,
            mu_within_factor_2: None,
            adjoint_included: cfg.include_adjoint(),
            plateau: None,
            plateau_tol: cfg.plateau_tol(),
            plateau_state_control: None,
            fit: None,
            fit_state_control: None,
            group: None,
        },
        solve: None,
        anchored: None,
        trim: None,
        deviation: None,
        failure: None,
    };
    match turnpike_stages(cfg, &mut run) {
        Ok(()) => run.report.verdict = verdict(&run.report, run.solve.as_ref()),
        Err((stage, e)) => {
            log::warn!("turnpike pipeline halted in stage {stage:?}: {e}");
            run.report.failed_stage = Some(stage);
            run.report.error = Some(e.to_string());
            run.report.verdict = Verdict::Failed;
            run.failure = Some(e);
        }
    }
    run
}

fn verdict(report: &TurnpikeReport, solve: Option<&SolveRun>) -> Verdict {
    let hyperbolic = report.certification.as_ref().is_some_and(|c| c.hyperbolic);
    if !hyperbolic {
        return Verdict::NotClaimed;
    }
    let converged = solve.is_some_and(|s| s.result.status == SolveStatus::Converged);
    let fit_ok = report
        .fit
        .as_ref()
        .is_some_and(|f| f.reliable && f.mu_hat > 0.0 && f.r_squared > MIN_R_SQUARED);
    let plateau_ok = report.plateau.is_some_and(|p| p < report.plateau_tol);
    if converged && fit_ok && plateau_ok {
        Verdict::Positive
    } else {
        Verdict::Negative
    }
}

type StageResult<T> = std::result::Result<T, (Stage, Error)>;

fn at<T>(stage: Stage, r: Result<T>) -> StageResult<T> {
    r.map_err(|e| (stage, e))
}

fn turnpike_stages(cfg: &RunConfig, run: &mut TurnpikeRun) -> StageResult<()> {
    let StaticRun { ocp, sol } = at(Stage::Static, run_static(cfg))?;
    run.report.static_point = Some(StaticReport::new(cfg.problem, &sol));

    let cert = at(
        Stage::Certify,
        certify(ocp.system.as_ref(), &sol, cfg.analysis.zero_tol),
    )?;
    run.report.mu_certified = cert.report.mu.filter(|_| cert.report.hyperbolic);
    run.report.certification = Some(cert.report);

    let mut result = at(Stage::Solve, solve(&ocp, &cfg.solver, Some(&sol)))?;
    if result.status == SolveStatus::Diverged {
        let msg = result.message.clone();
        run.solve = Some(SolveRun {
            ocp,
            static_sol: sol,
            result,
            pmp_residual: None,
        });
        run.report.solve = Some(SolveReport::new(cfg.problem, run.solve.as_ref().expect("just set")));
        return Err((Stage::Solve, Error::SolverDiverged(msg)));
    }
    result.trajectory = at(Stage::Reconstruct, reconstruct_group(&ocp, &result.trajectory))?;
    let pmp = at(Stage::Solve, pmp_residual(&ocp, &result))?;
    let traj = result.trajectory.clone();
    run.solve = Some(SolveRun {
        ocp: ocp.clone(),
        static_sol: sol.clone(),
        result,
        pmp_residual: Some(pmp),
    });
    run.report.solve = Some(SolveReport::new(cfg.problem, run.solve.as_ref().expect("just set")));

    // a degenerate static family is pinned to the member the solution visits
    let mid = traj
        .times
        .iter()
        .enumerate()
        .min_by(|a, b| {
            (a.1 - 0.5 * ocp.horizon)
                .abs()
                .total_cmp(&(b.1 - 0.5 * ocp.horizon).abs())
        })
        .map_or(0, |(i, _)| i);
    let anchored = at(
        Stage::AnchorTrim,
        anchor_static_family(ocp.system.as_ref(), &sol, &traj.states[mid]),
    )?;
    if anchored != sol {
        run.report.anchored_static = Some(StaticReport::new(cfg.problem, &anchored));
    }
    let trim = at(Stage::AnchorTrim, anchor_trim(&ocp, &traj, &anchored))?;

    let dev = at(
        Stage::Deviation,
        deviation_series(&traj, &anchored, Some(&trim), cfg.include_adjoint()),
    )?;
    let dev_yu = at(Stage::Deviation, deviation_series(&traj, &anchored, None, false))?;
    run.report.adjoint_included = dev.adjoint_included;

    let windows = &cfg.analysis.windows;
    let fit = at(
        Stage::Fit,
        fit_envelope_in(&dev.times, &dev.reduced, ocp.horizon, windows),
    )?;
    let fit_yu = at(
        Stage::Fit,
        fit_envelope_in(&dev.times, &dev_yu.reduced, ocp.horizon, windows),
    )?;
    let t_end = ocp.horizon;
    let envelope = dev
        .times
        .iter()
        .map(|t| {
            let ok = fit.reliable && fit.mu_hat.is_finite() && fit.c_hat.is_finite();
            ok.then(|| fit.c_hat * ((-fit.mu_hat * t).exp() + (-fit.mu_hat * (t_end - t)).exp()))
        })
        .collect();
    let group = dev.group.as_ref().map(|g| {
        let max_mid = window_max(&dev.times, g, 0.3 * t_end, 0.7 * t_end);
        GroupMetrics {
            at_start: g[0],
            max_mid,
            decayed: max_mid < g[0] / GROUP_DECAY,
            max_attitude_window: window_max(&dev.times, g, 0.35 * t_end, 0.65 * t_end),
        }
    });

    let r = &mut run.report;
    r.mu_hat = Some(fit.mu_hat);
    r.c_hat = Some(fit.c_hat);
    r.plateau = Some(fit.plateau);
    r.plateau_state_control = Some(fit_yu.plateau);
    if let Some(mu) = r.mu_certified {
        let ratio = fit.mu_hat / mu;
        r.mu_ratio = Some(ratio);
        r.mu_within_factor_2 = Some((0.5..=2.0).contains(&ratio));
    }
    r.fit = Some(fit);
    r.fit_state_control = Some(fit_yu);
    r.group = group;
    run.deviation = Some(DeviationTable {
        times: dev.times,
        eps_red: dev.reduced,
        eps_yu: dev_yu.reduced,
        eps_grp: dev.group,
        envelope,
    });
    run.anchored = Some(anchored);
    run.trim = Some(trim);
    Ok(())
}

// ---------------------------------------------------------------------------
// Plots

/// Each state and control against its static value.
pub fn trajectory_plots(problem: Problem, traj: &Trajectory, sol: &StaticSolution) -> Vec<(String, String)> {
    let t = traj.times.clone();
    let span = vec![t[0], *t.last().expect("non-empty grid")];
    let names = state_names(problem);
    let mut states = Plot {
        title: format!("{} states", problem.name()),
        x_label: "t".into(),
        y_label: "state".into(),
        ..Plot::default()
    };
    for (i, name) in names.iter().enumerate() {
        states.series.push(Series::new(
            *name,
            t.clone(),
            traj.states.iter().map(|y| y[i]).collect(),
            i,
        ));
        states
            .series
            .push(Series::new(format!("{name} trim"), span.clone(), vec![sol.y_bar[i]; 2], i).dashed());
    }
    let mut controls = Plot {
        title: format!("{} controls", problem.name()),
        x_label: "t".into(),
        y_label: "control".into(),
        ..Plot::default()
    };
    for j in 0..sol.u_bar.len() {
        let u = (0..t.len()).map(|k| traj.control_at_node(k)[j]).collect();
        controls
            .series
            .push(Series::new(format!("u_{}", j + 1), t.clone(), u, j));
        controls
            .series
            .push(Series::new(format!("u_{} trim", j + 1), span.clone(), vec![sol.u_bar[j]; 2], j).dashed());
    }
    vec![
        ("states.svg".into(), render(&states)),
        ("controls.svg".into(), render(&controls)),
    ]
}

/// Trajectory plots plus the deviation series and a planar projection of the
/// group motion against its trim.
pub fn turnpike_plots(problem: Problem, run: &TurnpikeRun) -> Vec<(String, String)> {
    let (Some(solve), Some(sol), Some(trim), Some(dev)) = (
        run.solve.as_ref(),
        run.anchored.as_ref(),
        run.trim.as_ref(),
        run.deviation.as_ref(),
    ) else {
        return Vec::new();
    };
    let traj = &solve.result.trajectory;
    let mut out = trajectory_plots(problem, traj, sol);

    let t = dev.times.clone();
    let mut deviation = Plot {
        title: format!("{} deviation from the trim", problem.name()),
        x_label: "t".into(),
        y_label: "deviation".into(),
        log_y: true,
        ..Plot::default()
    };
    deviation
        .series
        .push(Series::new("eps_red", t.clone(), dev.eps_red.clone(), 0));
    if run.report.adjoint_included {
        deviation
            .series
            .push(Series::new("eps_yu", t.clone(), dev.eps_yu.clone(), 2));
    }
    if let Some(g) = &dev.eps_grp {
        deviation.series.push(Series::new("eps_grp", t.clone(), g.clone(), 1));
    }
    if dev.envelope.iter().all(Option::is_some) {
        let env = dev.envelope.iter().map(|e| e.unwrap_or(f64::NAN)).collect();
        deviation
            .series
            .push(Series::new("envelope", t.clone(), env, 3).dashed());
    }
    out.push(("deviation.svg".into(), render(&deviation)));

    if let Some(group) = traj.group.as_ref() {
        let (plot, ok) = match problem {
            Problem::Kepler => {
                let orbit = |s: &[f64], th: &[f64]| -> (Vec<f64>, Vec<f64>) {
                    s.iter().zip(th).map(|(r, a)| (r * a.cos(), r * a.sin())).unzip()
                };
                let s: Vec<f64> = traj.states.iter().map(|y| y[0]).collect();
                let th: Vec<f64> = group.iter().map(|g| g.angles[0]).collect();
                let th_bar: Vec<f64> = trim.iter().map(|g| g.angles[0]).collect();
                let (x, y) = orbit(&s, &th);
                let (xb, yb) = orbit(&vec![sol.y_bar[0]; th_bar.len()], &th_bar);
                let plot = Plot {
                    title: "kepler orbit".into(),
                    x_label: "s cos(theta)".into(),
                    y_label: "s sin(theta)".into(),
                    log_y: false,
                    series: vec![Series::new("orbit", x, y, 0), Series::new("trim", xb, yb, 1).dashed()],
                };
                (plot, true)
            }
            _ => {
                let curve = |g: &[GroupElement]| -> (Vec<f64>, Vec<f64>) {
                    g.iter()
                        .map(|e| {
                            let r = body_diagonal(&e.quaternions[0]);
                            (r.y, r.z)
                        })
                        .unzip()
                };
                let (x, y) = curve(group);
                let (xb, yb) = curve(trim);
                let plot = Plot {
                    title: format!("{} attitude, R^T (1,1,1) projected", problem.name()),
                    x_label: "y component".into(),
                    y_label: "z component".into(),
                    log_y: false,
                    series: vec![
                        Series::new("solution", x, y, 0),
                        Series::new("trim", xb, yb, 1).dashed(),
                    ],
                };
                (plot, group.iter().all(|g| !g.quaternions.is_empty()))
            }
        };
        if ok {
            out.push(("projection.svg".into(), render(&plot)));
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Invariant and oracle checks

#[derive(Debug, Clone, Serialize)]
pub struct CheckItem {
    pub name: String,
    pub passed: bool,
    pub value: f64,
    pub tolerance: f64,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckReport {
    pub problem: Problem,
    pub seed: u64,
    pub passed: bool,
    pub checks: Vec<CheckItem>,
}

fn item(name: &str, value: f64, tolerance: f64, passed: bool, detail: impl Into<String>) -> CheckItem {
    CheckItem {
        name: name.into(),
        passed,
        value,
        tolerance,
        detail: detail.into(),
    }
}

fn below(name: &str, value: f64, tolerance: f64) -> CheckItem {
    item(name, value, tolerance, value < tolerance, "")
}

/// The search box documented for the static oracle, where one exists.
pub fn oracle_box(problem: Problem) -> Option<SearchBox> {
    let b = |lo: &[f64], hi: &[f64]| SearchBox {
        lower: DVector::from_column_slice(lo),
        upper: DVector::from_column_slice(hi),
    };
    match problem {
        Problem::Kepler => Some(b(&[3.0, -0.5, 0.0, -0.5, -0.5], &[6.0, 0.5, 0.3, 0.5, 0.5])),
        Problem::RigidBody => Some(b(
            &[-1.5, -1.5, -1.5, -1.0, -1.0, -1.0],
            &[1.5, 1.5, 1.5, 1.0, 1.0, 1.0],
        )),
        Problem::Rotors => None,
    }
}

/// Amplitude of the random controls used by the randomised checks; larger
/// controls drive the long-horizon rollouts into RK4 instability, where
/// central differences lose all accuracy.
pub const ORACLE_AMPLITUDE: f64 = 0.05;

/// Ratio of successive RK4 errors when `dt` is halved, with a fine-grid
/// reference; 16 for a fourth-order method.
pub fn rk4_convergence_factor(ocp: &ReducedOcp, u: &DVector<f64>, horizon: f64) -> Result<f64> {
    let run = |n: usize| -> Result<Trajectory> { rollout(ocp, &ControlGrid::constant(horizon, n, u)?, 1) };
    let reference = run(64 * 40)?;
    let e1 = (run(40)?.final_state() - reference.final_state()).norm();
    let e2 = (run(80)?.final_state() - reference.final_state()).norm();
    Ok(e1 / e2)
}

pub fn run_check(cfg: &RunConfig) -> Result<CheckReport> {
    let seed = cfg.output.seed;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let StaticRun { ocp, sol } = run_static(cfg)?;
    let sys = ocp.system.as_ref();
    let mut checks = Vec::new();

    checks.push(below(
        "jacobian_self_test",
        jacobian_self_test(sys, 20, &mut rng)?,
        1e-5,
    ));
    match cfg.problem {
        Problem::Kepler => {
            let p = cfg.kepler_params();
            let full = KeplerFull(Kepler::new(p.k, p.m2, p.s_bar));
            checks.push(below("equivariance", equivariance_check(&full, 20, &mut rng)?, 1e-10));
        }
        Problem::RigidBody => {
            let p = cfg.rigid_body_params();
            let full = RigidBodyFull(RigidBody {
                inertia: p.inertia.into(),
                omega_ref: p.omega_ref.into(),
                u_ref: p.u_ref.into(),
            });
            checks.push(below("equivariance", equivariance_check(&full, 20, &mut rng)?, 1e-12));
        }
        Problem::Rotors => {}
    }

    checks.push(below("static_residual", sol.residual_dyn.max(sol.residual_kkt), 1e-10));
    let (fy, fu) = sys.dynamics_jacobian(&sol.y_bar, &sol.u_bar)?;
    let (gy, gu) = sys.cost_gradient(&sol.y_bar, &sol.u_bar);
    let h_u = fu.transpose() * &sol.p_bar - gu;
    let h_y = fy.transpose() * &sol.p_bar - gy;
    checks.push(below("static_pmp_stationarity", h_u.amax().max(h_y.amax()), 1e-9));
    if let Some(b) = oracle_box(cfg.problem) {
        let oracle = static_bruteforce_oracle(sys, &b, 11)?;
        let inside = oracle.within_one_cell(&sol.y_bar, &sol.u_bar);
        let dist = (&sol.y_bar - &oracle.y).amax().max((&sol.u_bar - &oracle.u).amax());
        checks.push(item(
            "static_oracle",
            dist,
            oracle.spacing.min(),
            inside,
            format!(
                "oracle point y = {:?}, u = {:?}",
                oracle.y.as_slice(),
                oracle.u.as_slice()
            ),
        ));
    }

    match certify(sys, &sol, cfg.analysis.zero_tol) {
        Ok(c) => {
            let r = c.report;
            checks.push(below("hessian_symmetry", r.asymmetry, 1e-8));
            checks.push(below("hamiltonian_pairing", r.pairing_error, 1e-8));
            checks.push(below("eigen_residual", r.eigen_residual, 1e-8));
            checks.push(item(
                "hyperbolic_implies_no_zero",
                r.zero_count as f64,
                0.0,
                !r.hyperbolic || r.zero_count == 0,
                format!("hyperbolic = {}, mu = {:?}", r.hyperbolic, r.mu),
            ));
        }
        Err(e @ Error::SingularHuu) => checks.push(item("certify", f64::NAN, 0.0, false, e.to_string())),
        Err(e) => return Err(e),
    }

    if cfg.problem == Problem::Kepler {
        let p = cfg.kepler_params();
        let kep = Kepler::new(p.k, p.m2, p.s_bar);
        let z = kepler_lift(&sol.y_bar, &sol.p_bar, p.theta0, 0.0);
        let full = symmetry_zero_eigen_test(|x| kepler_full_pmp_field(&kep, sol.y_bar[2], x), &z)?;
        checks.push(item(
            "symmetry_zero_full",
            full as f64,
            1.0,
            full >= 1,
            "needs at least one",
        ));
        let zr = DVector::from_iterator(6, sol.y_bar.iter().chain(sol.p_bar.iter()).copied());
        let reduced = symmetry_zero_eigen_test(|x| reduced_pmp_field(&kep, x), &zr)?;
        checks.push(item(
            "symmetry_zero_reduced",
            reduced as f64,
            0.0,
            reduced == 0,
            "needs none",
        ));
    }

    let grad = gradient_oracle(&ocp, 10, 20, ORACLE_AMPLITUDE, rng.gen())?;
    checks.push(below("gradient_oracle", grad, 1e-5));

    let u = DVector::from_fn(ocp.m(), |_, _| rng.gen_range(-ORACLE_AMPLITUDE..ORACLE_AMPLITUDE));
    let factor = rk4_convergence_factor(&ocp, &u, ocp.horizon.min(10.0))?;
    checks.push(item(
        "rk4_order",
        factor,
        3.2,
        (factor - 16.0).abs() < 3.2,
        "expected 16",
    ));

    let n = cfg.solver.intervals;
    let values = nalgebra::DMatrix::from_fn(n, ocp.m(), |_, _| rng.gen_range(-ORACLE_AMPLITUDE..ORACLE_AMPLITUDE));
    let grid = ControlGrid::new(ocp.horizon, values)?;
    let traj = reconstruct_group(&ocp, &rollout(&ocp, &grid, cfg.solver.substeps)?)?;
    checks.push(below(
        "quaternion_norm",
        quaternion_norm_error(&traj).unwrap_or(0.0),
        1e-12,
    ));
    let csv = trajectory_to_csv(&traj)?;
    let back = parse_trajectory_csv(&csv)?;
    let same = trajectory_to_csv(&back)? == csv && back.states == traj.states && back.group == traj.group;
    checks.push(item("csv_round_trip", 0.0, 0.0, same, "bit-exact re-parse"));
    let again = reconstruct_group(&ocp, &rollout(&ocp, &grid, cfg.solver.substeps)?)?;
    checks.push(item(
        "deterministic_rollout",
        0.0,
        0.0,
        trajectory_to_csv(&again)? == csv,
        "identical bytes",
    ));

    Ok(CheckReport {
        problem: cfg.problem,
        seed,
        passed: checks.iter().all(|c| c.passed),
        checks,
    })
}
