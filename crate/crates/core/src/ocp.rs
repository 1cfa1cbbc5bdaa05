//! Direct single shooting for the reduced OCP.
//!
//! Controls are piecewise constant on the grid, the dynamics are rolled out
//! with RK4, and gradients come from the exact reverse sweep through every RK4
//! stage (discrete adjoint). Terminal equality constraints are handled by an
//! augmented Lagrangian whose inner problems are solved with L-BFGS.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::integrator::{rollout, rollout_recorded, ControlGrid, Trajectory};
use crate::static_solver::StaticSolution;
use crate::systems::{ReducedOcp, TerminalCondition};

const ARMIJO_C1: f64 = 1e-4;
const MIN_STEP: f64 = 1e-14;
const WOLFE_C2: f64 = 0.9;
const WOLFE_DELTA: f64 = 0.1;
/// Relative size of the rounding noise in one evaluation of L_A.
const NOISE_BAND: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub intervals: usize,
    pub substeps: usize,
    pub max_outer: usize,
    pub max_inner: usize,
    pub inner_grad_tol: f64,
    pub constraint_tol: f64,
    pub penalty_init: f64,
    pub penalty_growth: f64,
    pub memory: usize,
    /// Constant initial control; the static control `ū` when absent.
    pub init_control: Option<Vec<f64>>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            intervals: 200,
            substeps: 4,
            max_outer: 20,
            max_inner: 500,
            inner_grad_tol: 1e-7,
            constraint_tol: 1e-8,
            penalty_init: 10.0,
            penalty_growth: 10.0,
            memory: 20,
            init_control: None,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("intervals", self.intervals),
            ("substeps", self.substeps),
            ("max_outer", self.max_outer),
            ("max_inner", self.max_inner),
            ("memory", self.memory),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("solver.{name} must be positive")));
            }
        }
        let reals = [
            ("inner_grad_tol", self.inner_grad_tol),
            ("constraint_tol", self.constraint_tol),
            ("penalty_init", self.penalty_init),
        ];
        for (name, v) in reals {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidConfig(format!("solver.{name} must be positive")));
            }
        }
        if !(self.penalty_growth > 1.0) {
            return Err(Error::InvalidConfig("solver.penalty_growth must be > 1".into()));
        }
        if let Some(u) = &self.init_control {
            if u.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidConfig("solver.init_control must be finite".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Converged,
    /// Iteration budget exhausted before both tolerances were met.
    MaxIterations,
    Stalled,
    Diverged,
}

impl SolveStatus {
    /// 0 when converged, 3 for an unfinished solve, 4 for divergence.
    pub fn exit_code(self) -> i32 {
        match self {
            SolveStatus::Converged => 0,
            SolveStatus::MaxIterations | SolveStatus::Stalled => 3,
            SolveStatus::Diverged => 4,
        }
    }
}

/// One augmented-Lagrangian outer iteration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OuterRecord {
    pub violation: f64,
    pub penalty: f64,
    pub inner_iterations: usize,
    pub stationarity: f64,
}

#[derive(Debug, Clone)]
pub struct SolveResult {
    /// Adjoints hold `p_y` with the PMP sign.
    pub trajectory: Trajectory,
    /// Effective terminal multipliers `λ + ρc` at the final iterate.
    pub multipliers: DVector<f64>,
    pub stationarity: f64,
    pub constraint_violation: f64,
    pub outer: Vec<OuterRecord>,
    pub status: SolveStatus,
    /// False if any accepted inner step raised the objective above the
    /// rounding band `1e-12·max(1, |L_A|)`.
    pub descent_ok: bool,
    pub message: String,
}

impl SolveResult {
    pub fn inner_iterations(&self) -> usize {
        self.outer.iter().map(|o| o.inner_iterations).sum()
    }
}

/// Objective, gradient and node adjoints of `J + wᵀy(T)` on a control grid.
#[derive(Debug, Clone)]
pub struct AdjointResult {
    pub objective: f64,
    /// `intervals × m`.
    pub gradient: DMatrix<f64>,
    /// PMP-sign adjoints `p_y` at the grid nodes.
    pub adjoints: Vec<DVector<f64>>,
    pub trajectory: Trajectory,
}

/// Exact gradient of the discretised `J + wᵀy(T)` by a reverse sweep through
/// the recorded RK4 stages.
pub fn adjoint_gradient(
    ocp: &ReducedOcp,
    grid: &ControlGrid,
    substeps: usize,
    terminal_weight: &DVector<f64>,
) -> Result<AdjointResult> {
    let n = ocp.n();
    if terminal_weight.len() != n {
        return Err(Error::DimensionMismatch {
            what: "terminal weight",
            expected: n,
            got: terminal_weight.len(),
        });
    }
    let rec = rollout_recorded(ocp, grid, substeps, true)?;
    let traj = rec.traj;
    let n_int = grid.intervals();
    if rec.stages.len() != n_int * substeps {
        return Err(Error::GridMismatch(format!(
            "recorded {} stage sets, expected {}",
            rec.stages.len(),
            n_int * substeps
        )));
    }
    let sys = ocp.system.as_ref();
    let h = grid.dt / substeps as f64;
    const B: [f64; 4] = [1.0, 2.0, 2.0, 1.0];

    let mut lam = terminal_weight.clone();
    let mut gradient = DMatrix::zeros(n_int, ocp.m());
    let mut node_adj = vec![DVector::zeros(n); n_int + 1];
    node_adj[n_int] = -&lam;

    for k in (0..n_int).rev() {
        let u = &traj.controls[k];
        let mut gu = DVector::zeros(ocp.m());
        for j in (0..substeps).rev() {
            let st = &rec.stages[k * substeps + j];
            // cotangents of the stage slopes k_i and of the stage costs l_i
            let mut kbar: [DVector<f64>; 4] = std::array::from_fn(|i| &lam * (h * B[i] / 6.0));
            let mut ybar = lam.clone();
            for i in (0..4).rev() {
                let (fy, fu) = sys.dynamics_jacobian(&st[i], u)?;
                let (cy, cu) = sys.cost_gradient(&st[i], u);
                let lbar = h * B[i] / 6.0;
                let stage_bar = fy.transpose() * &kbar[i] + cy * lbar;
                gu += fu.transpose() * &kbar[i] + cu * lbar;
                match i {
                    3 => kbar[2] += &stage_bar * h,
                    2 => kbar[1] += &stage_bar * (0.5 * h),
                    1 => kbar[0] += &stage_bar * (0.5 * h),
                    _ => {}
                }
                ybar += stage_bar;
            }
            lam = ybar;
        }
        gradient.set_row(k, &gu.transpose());
        node_adj[k] = -&lam;
    }

    let objective = traj.cost + terminal_weight.dot(traj.final_state());
    let mut trajectory = traj;
    trajectory.adjoints = Some(node_adj.clone());
    Ok(AdjointResult {
        objective,
        gradient,
        adjoints: node_adj,
        trajectory,
    })
}

/// Terminal residual and the n-vector `Eᵀ(λ + ρc)` it induces.
fn terminal_terms(
    terminal: &TerminalCondition,
    y_t: &DVector<f64>,
    lambda: &DVector<f64>,
    rho: f64,
) -> (DVector<f64>, f64, DVector<f64>) {
    let c = terminal.residual(y_t);
    let mut weight = DVector::zeros(y_t.len());
    let mut extra = 0.0;
    if let TerminalCondition::Fixed { indices, .. } = terminal {
        for (r, &i) in indices.iter().enumerate() {
            weight[i] = lambda[r] + rho * c[r];
            extra += lambda[r] * c[r] + 0.5 * rho * c[r] * c[r];
        }
    }
    (c, extra, weight)
}

/// Augmented Lagrangian value and gradient on the flattened control vector.
struct Evaluation {
    value: f64,
    grad: DVector<f64>,
    c: DVector<f64>,
    adjoint: AdjointResult,
    weight: DVector<f64>,
}

fn evaluate(
    ocp: &ReducedOcp,
    horizon: f64,
    m: usize,
    substeps: usize,
    x: &DVector<f64>,
    lambda: &DVector<f64>,
    rho: f64,
) -> Result<Evaluation> {
    let n_int = x.len() / m;
    let grid = ControlGrid::new(horizon, DMatrix::from_row_slice(n_int, m, x.as_slice()))?;
    // The terminal weight depends on y(T); roll out once to get it.
    let probe = rollout_recorded(ocp, &grid, substeps, false)?.traj;
    let (c, extra, weight) = terminal_terms(&ocp.terminal, probe.final_state(), lambda, rho);
    let adjoint = adjoint_gradient(ocp, &grid, substeps, &weight)?;
    let value = probe.cost + extra;
    let grad = DVector::from_iterator(
        n_int * m,
        (0..n_int)
            .flat_map(|k| (0..m).map(move |j| (k, j)))
            .map(|(k, j)| adjoint.gradient[(k, j)]),
    );
    Ok(Evaluation {
        value,
        grad,
        c,
        adjoint,
        weight,
    })
}

struct InnerOutcome {
    x: DVector<f64>,
    eval: Evaluation,
    iterations: usize,
    stalled: bool,
    descent_ok: bool,
}

/// L-BFGS with Armijo backtracking.
fn lbfgs<F>(
    mut x: DVector<f64>,
    mut eval: Evaluation,
    f: F,
    memory: usize,
    max_iter: usize,
    grad_tol: f64,
) -> Result<InnerOutcome>
where
    F: Fn(&DVector<f64>) -> Result<Evaluation>,
{
    let mut hist: VecDeque<(DVector<f64>, DVector<f64>, f64)> = VecDeque::with_capacity(memory);
    let mut descent_ok = true;
    let mut iterations = 0;
    let mut stalled = false;

    while iterations < max_iter && eval.grad.amax() >= grad_tol {
        let g = &eval.grad;
        // two-loop recursion
        let mut q = g.clone();
        let mut alphas = Vec::with_capacity(hist.len());
        for (s, y, rho) in hist.iter().rev() {
            let a = rho * s.dot(&q);
            q.axpy(-a, y, 1.0);
            alphas.push(a);
        }
        let gamma = match hist.back() {
            Some((s, y, _)) => s.dot(y) / y.dot(y),
            None => 1.0 / g.norm().max(1.0),
        };
        q *= gamma;
        for ((s, y, rho), a) in hist.iter().zip(alphas.iter().rev()) {
            let b = rho * y.dot(&q);
            q.axpy(a - b, s, 1.0);
        }
        let mut d = -q;
        let mut slope = g.dot(&d);
        if !(slope < 0.0) {
            hist.clear();
            d = -g.clone();
            slope = g.dot(&d);
        }

        let noise = NOISE_BAND * eval.value.abs().max(1.0);
        let mut step = 1.0;
        let accepted = loop {
            if step * d.amax() < MIN_STEP {
                break None;
            }
            let trial = &x + &d * step;
            if let Ok(e) = f(&trial) {
                if e.value.is_finite() {
                    let armijo = e.value < eval.value && e.value <= eval.value + ARMIJO_C1 * step * slope;
                    // Below the rounding floor of L_A the slope is the only
                    // reliable signal (approximate Wolfe conditions).
                    let dphi = e.grad.dot(&d);
                    let approx_wolfe = (e.value - eval.value).abs() <= noise
                        && dphi >= WOLFE_C2 * slope
                        && dphi <= -(1.0 - 2.0 * WOLFE_DELTA) * slope;
                    if armijo || approx_wolfe {
                        break Some((trial, e));
                    }
                }
            }
            step *= 0.5;
        };
        let Some((x_new, e_new)) = accepted else {
            if hist.is_empty() {
                stalled = true;
                break;
            }
            // retry once from steepest descent
            hist.clear();
            continue;
        };
        if !(e_new.value < eval.value + noise) {
            descent_ok = false;
        }
        let s = &x_new - &x;
        let y = &e_new.grad - &eval.grad;
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            if hist.len() == memory {
                hist.pop_front();
            }
            hist.push_back((s, y, 1.0 / sy));
        }
        x = x_new;
        eval = e_new;
        iterations += 1;
    }
    Ok(InnerOutcome {
        x,
        eval,
        iterations,
        stalled,
        descent_ok,
    })
}

fn initial_control(
    ocp: &ReducedOcp,
    config: &SolverConfig,
    static_sol: Option<&StaticSolution>,
) -> Result<DVector<f64>> {
    let u = match (&config.init_control, static_sol) {
        (Some(u), _) => DVector::from_column_slice(u),
        (None, Some(s)) => s.u_bar.clone(),
        (None, None) => {
            return Err(Error::InvalidConfig(
                "either solver.init_control or a static solution is required".into(),
            ))
        }
    };
    if u.len() != ocp.m() {
        return Err(Error::DimensionMismatch {
            what: "initial control",
            expected: ocp.m(),
            got: u.len(),
        });
    }
    Ok(u)
}

fn diverged_result(ocp: &ReducedOcp, err: &Error) -> SolveResult {
    SolveResult {
        trajectory: Trajectory {
            times: vec![0.0],
            states: vec![ocp.y0.clone()],
            controls: vec![],
            adjoints: None,
            group: None,
            cost: f64::NAN,
            substeps: 1,
        },
        multipliers: DVector::zeros(ocp.terminal.constraint_count()),
        stationarity: f64::NAN,
        constraint_violation: f64::NAN,
        outer: vec![],
        status: SolveStatus::Diverged,
        descent_ok: true,
        message: err.to_string(),
    }
}

/// Solves the reduced OCP by single shooting.
pub fn solve(ocp: &ReducedOcp, config: &SolverConfig, static_sol: Option<&StaticSolution>) -> Result<SolveResult> {
    config.validate()?;
    let m = ocp.m();
    let u0 = initial_control(ocp, config, static_sol)?;
    let n_int = config.intervals;
    let x0 = DVector::from_fn(n_int * m, |i, _| u0[i % m]);
    let n_con = ocp.terminal.constraint_count();
    let mut lambda = DVector::zeros(n_con);
    let mut rho = if n_con == 0 { 0.0 } else { config.penalty_init };

    let eval_at = |x: &DVector<f64>, lambda: &DVector<f64>, rho: f64| {
        evaluate(ocp, ocp.horizon, m, config.substeps, x, lambda, rho)
    };
    let mut x = x0;
    let mut current = match eval_at(&x, &lambda, rho) {
        Ok(e) => e,
        Err(e @ Error::Diverged { .. }) => return Ok(diverged_result(ocp, &e)),
        Err(e) => return Err(e),
    };

    let mut outer = Vec::new();
    let mut descent_ok = true;
    let mut status = SolveStatus::MaxIterations;
    let mut message = String::new();
    let mut prev_violation = f64::INFINITY;
    let mut multipliers = lambda.clone();

    for it in 0..config.max_outer {
        let l = lambda.clone();
        let r = rho;
        // without constraints there is one inner solve, given the whole budget
        let budget = if n_con == 0 {
            config.max_inner * config.max_outer
        } else {
            config.max_inner
        };
        let inner = lbfgs(
            x.clone(),
            current,
            |xx| eval_at(xx, &l, r),
            config.memory,
            budget,
            config.inner_grad_tol,
        )?;
        descent_ok &= inner.descent_ok;
        x = inner.x;
        let e = inner.eval;
        let violation = if n_con == 0 { 0.0 } else { e.c.amax() };
        let stationarity = e.grad.amax();
        outer.push(OuterRecord {
            violation,
            penalty: rho,
            inner_iterations: inner.iterations,
            stationarity,
        });
        log::info!(
            "outer {it}: |c| = {violation:.3e}, rho = {rho:.1e}, |grad| = {stationarity:.3e}, inner = {}",
            inner.iterations
        );
        multipliers = &lambda + &e.c * rho;

        let done = violation < config.constraint_tol && stationarity < config.inner_grad_tol;
        if done {
            status = SolveStatus::Converged;
            current = e;
            break;
        }
        if inner.stalled && violation < config.constraint_tol {
            status = SolveStatus::Stalled;
            message = format!("line search stalled at |grad| = {stationarity:.3e}");
            current = e;
            break;
        }
        if n_con == 0 {
            status = if inner.stalled {
                message = format!("line search stalled at |grad| = {stationarity:.3e}");
                SolveStatus::Stalled
            } else {
                SolveStatus::MaxIterations
            };
            current = e;
            break;
        }
        lambda = multipliers.clone();
        // an unfinished inner solve says nothing about the penalty
        let inner_done = stationarity < config.inner_grad_tol;
        if inner_done && violation > 0.1 * prev_violation {
            rho *= config.penalty_growth;
        }
        prev_violation = violation;
        current = eval_at(&x, &lambda, rho)?;
    }

    let AdjointResult { mut trajectory, .. } = current.adjoint;
    trajectory.adjoints = Some(
        adjoint_gradient(
            ocp,
            &ControlGrid::new(ocp.horizon, DMatrix::from_row_slice(n_int, m, x.as_slice()))?,
            config.substeps,
            &current.weight,
        )?
        .adjoints,
    );
    let last = outer.last().cloned();
    Ok(SolveResult {
        trajectory,
        multipliers,
        stationarity: last.as_ref().map_or(f64::NAN, |o| o.stationarity),
        constraint_violation: last.as_ref().map_or(f64::NAN, |o| o.violation),
        outer,
        status,
        descent_ok,
        message,
    })
}

/// Interval-averaged `∇_u H` along a solution, `H = ⟨p_y, f⟩ − f⁰`, evaluated
/// with the RK4 stage adjoints of the discrete problem; returns the largest
/// Euclidean norm over the grid.
pub fn pmp_residual(ocp: &ReducedOcp, result: &SolveResult) -> Result<f64> {
    let traj = &result.trajectory;
    let m = ocp.m();
    let n_int = traj.controls.len();
    if n_int == 0 {
        return Err(Error::GridMismatch("solution has no control intervals".into()));
    }
    let values = DMatrix::from_fn(n_int, m, |k, j| traj.controls[k][j]);
    let grid = ControlGrid::new(ocp.horizon, values)?;
    let mut weight = DVector::zeros(ocp.n());
    if let TerminalCondition::Fixed { indices, .. } = &ocp.terminal {
        for (r, &i) in indices.iter().enumerate() {
            weight[i] = result.multipliers[r];
        }
    }
    let adj = adjoint_gradient(ocp, &grid, traj.substeps, &weight)?;
    // each gradient row is -∫ ∇_u H dt over its interval
    Ok((0..n_int)
        .map(|k| adj.gradient.row(k).norm() / grid.dt)
        .fold(0.0, f64::max))
}

/// Largest relative mismatch `‖g − g_fd‖_∞ / ‖g_fd‖_∞` between the adjoint
/// gradient of `J + wᵀy(T)` and central differences, over `grids` random
/// control grids with `intervals` cells and entries in `[−amp, amp]`.
pub fn gradient_oracle(ocp: &ReducedOcp, grids: usize, intervals: usize, amp: f64, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = ocp.m();
    let substeps = 4;
    let mut worst: f64 = 0.0;
    for _ in 0..grids {
        let values = DMatrix::from_fn(intervals, m, |_, _| rng.gen_range(-amp..amp));
        let weight = DVector::from_fn(ocp.n(), |_, _| rng.gen_range(-1.0..1.0));
        let grid = ControlGrid::new(ocp.horizon, values.clone())?;
        let adj = adjoint_gradient(ocp, &grid, substeps, &weight)?;
        let objective = |v: DMatrix<f64>| -> Result<f64> {
            let t = rollout(ocp, &ControlGrid::new(ocp.horizon, v)?, substeps)?;
            Ok(t.cost + weight.dot(t.final_state()))
        };
        let mut fd = DMatrix::zeros(intervals, m);
        for k in 0..intervals {
            for j in 0..m {
                let h = 1e-6 * values[(k, j)].abs().max(1.0);
                let mut vp = values.clone();
                vp[(k, j)] += h;
                let mut vm = values.clone();
                vm[(k, j)] -= h;
                fd[(k, j)] = (objective(vp)? - objective(vm)?) / (2.0 * h);
            }
        }
        worst = worst.max((&adj.gradient - &fd).amax() / fd.amax().max(f64::MIN_POSITIVE));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lie::{AlgebraVector, GroupSignature};
    use crate::systems::*;
    use std::sync::Arc;

    /// ẏ = u, f⁰ = ½u².
    #[derive(Debug)]
    struct Integrator1;

    impl ReducedSystem for Integrator1 {
        fn name(&self) -> &'static str {
            "integrator"
        }
        fn state_dim(&self) -> usize {
            1
        }
        fn control_dim(&self) -> usize {
            1
        }
        fn signature(&self) -> GroupSignature {
            GroupSignature::new(0, 0)
        }
        fn dynamics(&self, _y: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
            Ok(u.clone())
        }
        fn cost(&self, _y: &DVector<f64>, u: &DVector<f64>) -> f64 {
            0.5 * u[0] * u[0]
        }
        fn group_velocity(&self, _y: &DVector<f64>, _u: &DVector<f64>) -> AlgebraVector {
            AlgebraVector::zeros(self.signature())
        }
        fn dynamics_jacobian(&self, _y: &DVector<f64>, _u: &DVector<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
            Ok((DMatrix::zeros(1, 1), DMatrix::identity(1, 1)))
        }
        fn cost_gradient(&self, _y: &DVector<f64>, u: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
            (DVector::zeros(1), u.clone())
        }
        fn group_velocity_jacobian(&self, _y: &DVector<f64>, _u: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
            (DMatrix::zeros(0, 1), DMatrix::zeros(0, 1))
        }
        fn sample_point(&self, _rng: &mut dyn rand::RngCore) -> (DVector<f64>, DVector<f64>) {
            (DVector::zeros(1), DVector::zeros(1))
        }
    }

    fn integrator_ocp() -> ReducedOcp {
        ReducedOcp {
            system: Arc::new(Integrator1),
            y0: DVector::zeros(1),
            terminal: TerminalCondition::Free,
            g0: crate::lie::GroupElement::identity(GroupSignature::new(0, 0)),
            horizon: 1.0,
        }
    }

    #[test]
    fn decoupled_quadratic_gradient() {
        let ocp = integrator_ocp();
        let grid = ControlGrid::new(1.0, DMatrix::from_column_slice(2, 1, &[0.7, -1.3])).unwrap();
        let adj = adjoint_gradient(&ocp, &grid, 4, &DVector::zeros(1)).unwrap();
        assert!((adj.gradient[(0, 0)] - 0.5 * 0.7).abs() < 1e-15);
        assert!((adj.gradient[(1, 0)] - 0.5 * -1.3).abs() < 1e-15);
    }

    /// Constant-zero cost, used to check the zero-gradient case.
    #[derive(Debug)]
    struct ZeroCost(RigidBody);

    impl ReducedSystem for ZeroCost {
        fn name(&self) -> &'static str {
            "zero"
        }
        fn state_dim(&self) -> usize {
            3
        }
        fn control_dim(&self) -> usize {
            3
        }
        fn signature(&self) -> GroupSignature {
            self.0.signature()
        }
        fn dynamics(&self, y: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
            self.0.dynamics(y, u)
        }
        fn cost(&self, _y: &DVector<f64>, _u: &DVector<f64>) -> f64 {
            0.0
        }
        fn group_velocity(&self, y: &DVector<f64>, u: &DVector<f64>) -> AlgebraVector {
            self.0.group_velocity(y, u)
        }
        fn dynamics_jacobian(&self, y: &DVector<f64>, u: &DVector<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
            self.0.dynamics_jacobian(y, u)
        }
        fn cost_gradient(&self, _y: &DVector<f64>, _u: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
            (DVector::zeros(3), DVector::zeros(3))
        }
        fn group_velocity_jacobian(&self, y: &DVector<f64>, u: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
            self.0.group_velocity_jacobian(y, u)
        }
        fn sample_point(&self, rng: &mut dyn rand::RngCore) -> (DVector<f64>, DVector<f64>) {
            self.0.sample_point(rng)
        }
    }

    #[test]
    fn zero_cost_zero_weight_gives_zero_gradient() {
        let mut ocp = make_rigid_body(&RigidBodyParams::default()).unwrap();
        let rb = RigidBody {
            inertia: nalgebra::Vector3::new(1.0, 5.0, 10.0),
            omega_ref: nalgebra::Vector3::x(),
            u_ref: nalgebra::Vector3::zeros(),
        };
        ocp.system = Arc::new(ZeroCost(rb));
        let grid = ControlGrid::new(2.0, DMatrix::from_fn(10, 3, |i, j| (i + j) as f64 * 0.1)).unwrap();
        let adj = adjoint_gradient(&ocp, &grid, 4, &DVector::zeros(3)).unwrap();
        assert_eq!(adj.gradient.amax(), 0.0);
    }

    #[test]
    fn adjoint_matches_finite_differences() {
        let mut rb = make_rigid_body(&RigidBodyParams::default()).unwrap();
        rb.horizon = 4.0;
        let err = gradient_oracle(&rb, 1, 20, 0.5, 1).unwrap();
        assert!(err < 1e-5, "rigid body: {err}");
        let mut kep = make_kepler(&KeplerParams::default()).unwrap();
        kep.horizon = 8.0;
        let err = gradient_oracle(&kep, 1, 20, 0.05, 2).unwrap();
        assert!(err < 1e-5, "kepler: {err}");
    }

    #[test]
    fn start_on_trim_stays_on_trim() {
        let mut ocp = make_kepler(&KeplerParams::default()).unwrap();
        let yb = DVector::from_vec(vec![4.5, 0.0, circular_rate(1.0, 4.5)]);
        ocp.y0 = yb.clone();
        ocp.terminal = TerminalCondition::Fixed {
            indices: vec![0],
            values: vec![4.5],
        };
        let config = SolverConfig {
            init_control: Some(vec![0.0, 0.0]),
            intervals: 50,
            ..Default::default()
        };
        let res = solve(&ocp, &config, None).unwrap();
        assert_eq!(res.status, SolveStatus::Converged);
        assert!(res.inner_iterations() <= 2);
        assert!(res.trajectory.cost.abs() < 1e-20);
        assert!(res.trajectory.controls.iter().all(|u| u.amax() == 0.0));
        assert_eq!(pmp_residual(&ocp, &res).unwrap(), 0.0);
    }

    #[test]
    fn short_rigid_body_solve_converges() {
        let p = RigidBodyParams {
            horizon: 6.0,
            ..Default::default()
        };
        let ocp = make_rigid_body(&p).unwrap();
        let config = SolverConfig {
            intervals: 30,
            max_inner: 2000,
            init_control: Some(vec![0.0; 3]),
            ..Default::default()
        };
        let res = solve(&ocp, &config, None).unwrap();
        assert_eq!(res.status, SolveStatus::Converged, "{:?}", res.outer);
        assert!(res.descent_ok);
        assert!(res.constraint_violation < 1e-8);
        assert!((res.trajectory.final_state() - &ocp.y0).amax() < 1e-8);
        for w in res.outer.windows(2) {
            assert!(w[1].violation <= 1.01 * w[0].violation || w[1].penalty > w[0].penalty);
        }
        let r = pmp_residual(&ocp, &res).unwrap();
        assert!(r < 1e-4, "pmp residual {r}");

        // a kick on one interval breaks stationarity
        let mut bumped = res.clone();
        bumped.trajectory.controls[10][0] += 0.1;
        assert!(pmp_residual(&ocp, &bumped).unwrap() > 1e-2);
    }

    #[test]
    fn missing_initialisation_is_rejected() {
        let ocp = make_rigid_body(&RigidBodyParams::default()).unwrap();
        assert!(matches!(
            solve(&ocp, &SolverConfig::default(), None),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn config_validation() {
        let c = SolverConfig {
            penalty_growth: 1.0,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        let c = SolverConfig {
            intervals: 0,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        assert!(SolverConfig::default().validate().is_ok());
    }
}
