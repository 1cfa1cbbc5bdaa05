//! Fixed-step RK4 rollouts with the running cost carried as an extra state,
//! and reconstruction of the group variable along a reduced trajectory.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::lie::{group_step, GroupElement};
use crate::systems::ReducedOcp;

/// Piecewise-constant controls on a uniform grid of `intervals` cells.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlGrid {
    pub dt: f64,
    /// `intervals × m`.
    pub values: DMatrix<f64>,
}

impl ControlGrid {
    pub fn new(horizon: f64, values: DMatrix<f64>) -> Result<Self> {
        let n = values.nrows();
        if n == 0 {
            return Err(Error::InvalidConfig("control grid needs at least one interval".into()));
        }
        let dt = horizon / n as f64;
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(Error::InvalidConfig(format!("invalid step dt = {dt}")));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("control values must be finite".into()));
        }
        Ok(Self { dt, values })
    }

    /// Every interval holds the same control.
    pub fn constant(horizon: f64, intervals: usize, u: &DVector<f64>) -> Result<Self> {
        let values = DMatrix::from_fn(intervals, u.len(), |_, j| u[j]);
        Self::new(horizon, values)
    }

    pub fn intervals(&self) -> usize {
        self.values.nrows()
    }

    pub fn control(&self, k: usize) -> DVector<f64> {
        self.values.row(k).transpose()
    }
}

/// Discretised solution of a reduced OCP on the control grid nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
    pub controls: Vec<DVector<f64>>,
    pub adjoints: Option<Vec<DVector<f64>>>,
    pub group: Option<Vec<GroupElement>>,
    pub cost: f64,
    pub substeps: usize,
}

impl Trajectory {
    pub fn final_state(&self) -> &DVector<f64> {
        self.states.last().expect("trajectory has at least one node")
    }

    /// Control held on the interval that starts at node `k`; the final node
    /// reuses the last interval's control.
    pub fn control_at_node(&self, k: usize) -> &DVector<f64> {
        &self.controls[k.min(self.controls.len() - 1)]
    }
}

/// Classical RK4 with `u` frozen across the stages.
pub fn rk4_step<F>(f: F, y: &DVector<f64>, u: &DVector<f64>, dt: f64) -> Result<DVector<f64>>
where
    F: Fn(&DVector<f64>, &DVector<f64>) -> Result<DVector<f64>>,
{
    let k1 = f(y, u)?;
    let k2 = f(&(y + &k1 * (0.5 * dt)), u)?;
    let k3 = f(&(y + &k2 * (0.5 * dt)), u)?;
    let k4 = f(&(y + &k3 * dt), u)?;
    Ok(y + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0))
}

/// Stage inputs `Y₁..Y₄` of one RK4 sub-step.
pub(crate) type Stages = [DVector<f64>; 4];

/// Rollout plus the stage states needed by the reverse sweep.
#[derive(Debug, Clone)]
pub(crate) struct RecordedRollout {
    pub traj: Trajectory,
    /// `intervals × substeps` entries, interval-major.
    pub stages: Vec<Stages>,
}

pub(crate) fn rollout_recorded(
    ocp: &ReducedOcp,
    grid: &ControlGrid,
    substeps: usize,
    record: bool,
) -> Result<RecordedRollout> {
    if substeps == 0 {
        return Err(Error::InvalidConfig("substeps must be >= 1".into()));
    }
    if grid.values.ncols() != ocp.m() {
        return Err(Error::DimensionMismatch {
            what: "control grid columns",
            expected: ocp.m(),
            got: grid.values.ncols(),
        });
    }
    let sys = ocp.system.as_ref();
    let n_int = grid.intervals();
    let h = grid.dt / substeps as f64;
    let mut y = ocp.y0.clone();
    let mut cost = 0.0;
    // Kahan compensation keeps the line-search noise floor near one ulp
    let mut carry = 0.0;
    let mut states = Vec::with_capacity(n_int + 1);
    let mut controls = Vec::with_capacity(n_int);
    let mut stages = Vec::with_capacity(if record { n_int * substeps } else { 0 });
    states.push(y.clone());

    for k in 0..n_int {
        let u = grid.control(k);
        let diverged = |e: Error| match e {
            Error::Singularity(_) => Error::Diverged { interval: k },
            other => other,
        };
        for _ in 0..substeps {
            let y1 = y.clone();
            let k1 = sys.dynamics(&y1, &u).map_err(diverged)?;
            let y2 = &y + &k1 * (0.5 * h);
            let k2 = sys.dynamics(&y2, &u).map_err(diverged)?;
            let y3 = &y + &k2 * (0.5 * h);
            let k3 = sys.dynamics(&y3, &u).map_err(diverged)?;
            let y4 = &y + &k3 * h;
            let k4 = sys.dynamics(&y4, &u).map_err(diverged)?;
            let l = sys.cost(&y1, &u) + 2.0 * sys.cost(&y2, &u) + 2.0 * sys.cost(&y3, &u) + sys.cost(&y4, &u);
            let term = h / 6.0 * l - carry;
            let next = cost + term;
            carry = (next - cost) - term;
            cost = next;
            y += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
            if record {
                stages.push([y1, y2, y3, y4]);
            }
        }
        if !y.iter().all(|v| v.is_finite()) || !cost.is_finite() {
            return Err(Error::Diverged { interval: k });
        }
        states.push(y.clone());
        controls.push(u);
    }

    let times = (0..=n_int).map(|k| k as f64 * grid.dt).collect();
    Ok(RecordedRollout {
        traj: Trajectory {
            times,
            states,
            controls,
            adjoints: None,
            group: None,
            cost,
            substeps,
        },
        stages,
    })
}

/// Integrates the reduced dynamics and the running cost over the grid.
pub fn rollout(ocp: &ReducedOcp, grid: &ControlGrid, substeps: usize) -> Result<Trajectory> {
    rollout_recorded(ocp, grid, substeps, false).map(|r| r.traj)
}

/// Fills `traj.group` by integrating `ġ = g ξ(y, u)` from `ocp.g0`, sampling ξ
/// at the midpoint of every RK4 sub-step.
pub fn reconstruct_group(ocp: &ReducedOcp, traj: &Trajectory) -> Result<Trajectory> {
    let sys = ocp.system.as_ref();
    let substeps = traj.substeps.max(1);
    let mut g = ocp.g0.clone();
    let mut group = Vec::with_capacity(traj.states.len());
    group.push(g.clone());
    for (k, u) in traj.controls.iter().enumerate() {
        let dt = traj.times[k + 1] - traj.times[k];
        let h = dt / substeps as f64;
        let mut y = traj.states[k].clone();
        for _ in 0..substeps {
            let mid = rk4_step(|a, b| sys.dynamics(a, b), &y, u, 0.5 * h)?;
            g = group_step(&g, &sys.group_velocity(&mid, u), h)?;
            y = rk4_step(|a, b| sys.dynamics(a, b), &y, u, h)?;
        }
        group.push(g.clone());
    }
    let mut out = traj.clone();
    out.group = Some(group);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lie::{group_distance, trim_flow};
    use crate::systems::*;
    use nalgebra::Vector3;
    use std::f64::consts::PI;

    #[test]
    fn rk4_examples() {
        let zero = |_: &DVector<f64>, _: &DVector<f64>| Ok(DVector::zeros(2));
        let y = DVector::from_vec(vec![1.0, -2.0]);
        assert_eq!(rk4_step(zero, &y, &DVector::zeros(0), 0.1).unwrap(), y);

        let lin = |y: &DVector<f64>, _: &DVector<f64>| Ok(y.clone());
        let y1 = rk4_step(lin, &DVector::from_element(1, 1.0), &DVector::zeros(0), 0.1).unwrap();
        let taylor = 1.0 + 0.1 + 0.01 / 2.0 + 0.001 / 6.0 + 0.0001 / 24.0;
        assert!((y1[0] - taylor).abs() < 1e-15);
    }

    #[test]
    fn kepler_equilibrium_is_preserved() {
        let p = KeplerParams::default();
        let ocp = make_kepler(&p).unwrap();
        let yb = DVector::from_vec(vec![4.5, 0.0, circular_rate(1.0, 4.5)]);
        let u = DVector::zeros(2);
        let mut y = yb.clone();
        for _ in 0..100 {
            y = rk4_step(|a, b| ocp.system.dynamics(a, b), &y, &u, 0.2).unwrap();
        }
        assert!((y - yb).amax() < 1e-12);
    }

    #[test]
    fn trim_rollout_has_zero_cost() {
        let mut ocp = make_kepler(&KeplerParams::default()).unwrap();
        ocp.y0 = DVector::from_vec(vec![4.5, 0.0, circular_rate(1.0, 4.5)]);
        let grid = ControlGrid::constant(40.0, 200, &DVector::zeros(2)).unwrap();
        let tr = rollout(&ocp, &grid, 4).unwrap();
        assert!(tr.cost.abs() < 1e-12);
        assert!((tr.final_state() - &ocp.y0).amax() < 1e-12);
        assert_eq!(tr.states[0], ocp.y0);
        assert_eq!(tr.times.len(), 201);
    }

    #[test]
    fn short_horizon_limit() {
        let ocp = make_rigid_body(&RigidBodyParams::default()).unwrap();
        let grid = ControlGrid::constant(1e-9, 3, &DVector::from_element(3, 0.2)).unwrap();
        let tr = rollout(&ocp, &grid, 4).unwrap();
        assert!(tr.cost.abs() < 1e-8);
        assert!((tr.final_state() - &ocp.y0).amax() < 1e-8);
    }

    #[test]
    fn divergence_names_the_interval() {
        let mut ocp = make_kepler(&KeplerParams::default()).unwrap();
        ocp.y0 = DVector::from_vec(vec![0.5, -3.0, 0.0]);
        let grid = ControlGrid::constant(10.0, 50, &DVector::zeros(2)).unwrap();
        match rollout(&ocp, &grid, 4) {
            Err(Error::Diverged { interval }) => assert!(interval < 50),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn rk4_self_convergence_order() {
        let ocp = make_rigid_body(&RigidBodyParams::default()).unwrap();
        let u = DVector::from_vec(vec![0.3, -0.2, 0.1]);
        let run = |n: usize| {
            let grid = ControlGrid::constant(10.0, n, &u).unwrap();
            rollout(&ocp, &grid, 1).unwrap()
        };
        let reference = run(64 * 40);
        let e1 = (run(40).final_state() - reference.final_state()).norm();
        let e2 = (run(80).final_state() - reference.final_state()).norm();
        let ratio = e1 / e2;
        assert!((ratio - 16.0).abs() < 0.2 * 16.0, "ratio {ratio}");
        // the quadrature error reaches its asymptotic regime one level later
        let c1 = (run(160).cost - reference.cost).abs();
        let c2 = (run(320).cost - reference.cost).abs();
        assert!((c1 / c2 - 16.0).abs() < 0.2 * 16.0, "cost ratio {}", c1 / c2);
    }

    #[test]
    fn reconstruction_examples() {
        // ξ ≡ 0: the rigid body at rest never moves.
        let mut ocp = make_rigid_body(&RigidBodyParams::default()).unwrap();
        ocp.y0 = DVector::zeros(3);
        let grid = ControlGrid::constant(5.0, 10, &DVector::zeros(3)).unwrap();
        let tr = reconstruct_group(&ocp, &rollout(&ocp, &grid, 4).unwrap()).unwrap();
        for g in tr.group.as_ref().unwrap() {
            assert_eq!(g, &ocp.g0);
        }

        // Uniform rotation about x for time π.
        ocp.y0 = DVector::from_vec(vec![1.0, 0.0, 0.0]);
        let grid = ControlGrid::constant(PI, 50, &DVector::zeros(3)).unwrap();
        let tr = reconstruct_group(&ocp, &rollout(&ocp, &grid, 4).unwrap()).unwrap();
        let q = tr.group.unwrap().last().unwrap().quaternions[0];
        let e2 = q * Vector3::y();
        assert!((e2 + Vector3::y()).norm() < 1e-6);
    }

    #[test]
    fn kepler_trim_angle_is_linear() {
        let mut ocp = make_kepler(&KeplerParams::default()).unwrap();
        let vb = circular_rate(1.0, 4.5);
        ocp.y0 = DVector::from_vec(vec![4.5, 0.0, vb]);
        let grid = ControlGrid::constant(40.0, 200, &DVector::zeros(2)).unwrap();
        let tr = reconstruct_group(&ocp, &rollout(&ocp, &grid, 4).unwrap()).unwrap();
        let xi = ocp.system.group_velocity(&ocp.y0, &DVector::zeros(2));
        for (t, g) in tr.times.iter().zip(tr.group.as_ref().unwrap()) {
            assert!((g.angles[0] - vb * t).abs() < 1e-9);
            let trim = trim_flow(&ocp.g0, &xi, *t).unwrap();
            assert!(group_distance(g, &trim).unwrap() < 1e-9);
        }
    }

    #[test]
    fn deterministic_rollouts() {
        let ocp = make_rotors(&RotorsParams::default()).unwrap();
        let values = DMatrix::from_fn(30, 3, |i, j| ((i * 3 + j) as f64 * 0.37).sin() * 0.2);
        let grid = ControlGrid::new(6.0, values).unwrap();
        let a = rollout(&ocp, &grid, 4).unwrap();
        let b = rollout(&ocp, &grid, 4).unwrap();
        assert_eq!(a, b);
    }
}
