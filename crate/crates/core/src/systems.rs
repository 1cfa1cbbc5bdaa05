//! Symmetry-reduced optimal control problems.
//!
//! A [`ReducedSystem`] supplies the reduced dynamics `ẏ = f(y, u)`, the running
//! cost `f⁰(y, u)` and the group velocity `ξ(y, u)` of the reconstruction
//! equation `ġ = g ξ`, together with their analytic first derivatives. None of
//! these maps receives the group variable.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lie::{hat, AlgebraVector, GroupElement, GroupSignature};

pub trait ReducedSystem: Send + Sync + fmt::Debug {
    fn name(&self) -> &'static str;
    fn state_dim(&self) -> usize;
    fn control_dim(&self) -> usize;
    fn signature(&self) -> GroupSignature;

    fn dynamics(&self, y: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>>;
    fn cost(&self, y: &DVector<f64>, u: &DVector<f64>) -> f64;
    fn group_velocity(&self, y: &DVector<f64>, u: &DVector<f64>) -> AlgebraVector;

    /// `(∂f/∂y, ∂f/∂u)`.
    fn dynamics_jacobian(&self, y: &DVector<f64>, u: &DVector<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)>;
    /// `(∇_y f⁰, ∇_u f⁰)`.
    fn cost_gradient(&self, y: &DVector<f64>, u: &DVector<f64>) -> (DVector<f64>, DVector<f64>);
    /// `(∂ξ/∂y, ∂ξ/∂u)` in the flat algebra layout.
    fn group_velocity_jacobian(&self, y: &DVector<f64>, u: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>);

    /// A random point of the domain, used by derivative self-tests.
    fn sample_point(&self, rng: &mut dyn rand::RngCore) -> (DVector<f64>, DVector<f64>);
}

/// Terminal condition on the reduced state.
#[derive(Debug, Clone, PartialEq)]
pub enum TerminalCondition {
    Free,
    /// `y(T)[indices[i]] = values[i]`.
    Fixed {
        indices: Vec<usize>,
        values: Vec<f64>,
    },
}

impl TerminalCondition {
    pub fn full(target: &DVector<f64>) -> Self {
        TerminalCondition::Fixed {
            indices: (0..target.len()).collect(),
            values: target.iter().copied().collect(),
        }
    }

    pub fn constraint_count(&self) -> usize {
        match self {
            TerminalCondition::Free => 0,
            TerminalCondition::Fixed { indices, .. } => indices.len(),
        }
    }

    /// Residual `c = y[indices] - values`.
    pub fn residual(&self, y: &DVector<f64>) -> DVector<f64> {
        match self {
            TerminalCondition::Free => DVector::zeros(0),
            TerminalCondition::Fixed { indices, values } => {
                DVector::from_iterator(indices.len(), indices.iter().zip(values).map(|(&i, v)| y[i] - v))
            }
        }
    }
}

/// A reduced OCP: system, boundary data and horizon.
#[derive(Debug, Clone)]
pub struct ReducedOcp {
    pub system: Arc<dyn ReducedSystem>,
    pub y0: DVector<f64>,
    pub terminal: TerminalCondition,
    pub g0: GroupElement,
    pub horizon: f64,
}

impl ReducedOcp {
    pub fn n(&self) -> usize {
        self.system.state_dim()
    }

    pub fn m(&self) -> usize {
        self.system.control_dim()
    }
}

fn v3(y: &DVector<f64>, offset: usize) -> Vector3<f64> {
    Vector3::new(y[offset], y[offset + 1], y[offset + 2])
}

fn uniform_vec(rng: &mut dyn rand::RngCore, n: usize, lo: f64, hi: f64) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.gen_range(lo..hi))
}

// ---------------------------------------------------------------------------
// Kepler

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KeplerParams {
    /// Gravitational product γ m₂.
    pub k: f64,
    pub m2: f64,
    /// Radius of the tracked circular orbit.
    pub s_bar: f64,
    /// Initial `(s, v_s, v_θ)`.
    pub y0: [f64; 3],
    /// Terminal radius; velocities are left free.
    pub s_terminal: f64,
    pub theta0: f64,
    pub horizon: f64,
}

impl Default for KeplerParams {
    fn default() -> Self {
        let k = 1.0;
        let s_bar = 4.5;
        Self {
            k,
            m2: 1.0,
            s_bar,
            y0: [5.0, 0.0, (k / s_bar.powi(3)).sqrt()],
            s_terminal: 6.0,
            theta0: 0.0,
            horizon: 40.0,
        }
    }
}

impl KeplerParams {
    pub fn validate(&self) -> Result<()> {
        let pos = [("k", self.k), ("m2", self.m2), ("s_bar", self.s_bar)];
        for (name, v) in pos {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidConfig(format!("kepler.{name} must be > 0, got {v}")));
            }
        }
        if !(self.y0[0] > 0.0) || !(self.s_terminal > 0.0) {
            return Err(Error::InvalidConfig("kepler radii must be > 0".into()));
        }
        if !(self.horizon > 0.0) {
            return Err(Error::InvalidConfig("kepler.horizon must be > 0".into()));
        }
        Ok(())
    }
}

/// Planar two-body problem in polar coordinates, reduced by the rotation θ.
#[derive(Debug, Clone)]
pub struct Kepler {
    pub k: f64,
    pub m2: f64,
    pub y_ref: DVector<f64>,
}

impl Kepler {
    pub fn new(k: f64, m2: f64, s_bar: f64) -> Self {
        Self {
            k,
            m2,
            y_ref: DVector::from_vec(vec![s_bar, 0.0, circular_rate(k, s_bar)]),
        }
    }
}

/// Angular rate `√(k/s³)` of the circular orbit of radius `s`.
pub fn circular_rate(k: f64, s: f64) -> f64 {
    (k / (s * s * s)).sqrt()
}

impl ReducedSystem for Kepler {
    fn name(&self) -> &'static str {
        "kepler"
    }
    fn state_dim(&self) -> usize {
        3
    }
    fn control_dim(&self) -> usize {
        2
    }
    fn signature(&self) -> GroupSignature {
        GroupSignature::new(0, 1)
    }

    fn dynamics(&self, y: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        let (s, vs, vt) = (y[0], y[1], y[2]);
        if !(s > 0.0) {
            return Err(Error::Singularity(format!("kepler radius s = {s} <= 0")));
        }
        Ok(DVector::from_vec(vec![
            vs,
            s * vt * vt - self.k / (s * s) + u[0] / self.m2,
            -2.0 * vt * vs / s + u[1] / (self.m2 * s * s),
        ]))
    }

    fn cost(&self, y: &DVector<f64>, u: &DVector<f64>) -> f64 {
        0.5 * ((y - &self.y_ref).norm_squared() + u.norm_squared())
    }

    fn group_velocity(&self, y: &DVector<f64>, _u: &DVector<f64>) -> AlgebraVector {
        AlgebraVector {
            so3: vec![],
            rates: vec![y[2]],
        }
    }

    fn dynamics_jacobian(&self, y: &DVector<f64>, u: &DVector<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let (s, vs, vt) = (y[0], y[1], y[2]);
        if !(s > 0.0) {
            return Err(Error::Singularity(format!("kepler radius s = {s} <= 0")));
        }
        let s2 = s * s;
        let s3 = s2 * s;
        let fy = DMatrix::from_row_slice(
            3,
            3,
            &[
                0.0,
                1.0,
                0.0,
                vt * vt + 2.0 * self.k / s3,
                0.0,
                2.0 * s * vt,
                2.0 * vt * vs / s2 - 2.0 * u[1] / (self.m2 * s3),
                -2.0 * vt / s,
                -2.0 * vs / s,
            ],
        );
        let fu = DMatrix::from_row_slice(3, 2, &[0.0, 0.0, 1.0 / self.m2, 0.0, 0.0, 1.0 / (self.m2 * s2)]);
        Ok((fy, fu))
    }

    fn cost_gradient(&self, y: &DVector<f64>, u: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        (y - &self.y_ref, u.clone())
    }

    fn group_velocity_jacobian(&self, _y: &DVector<f64>, _u: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        (DMatrix::from_row_slice(1, 3, &[0.0, 0.0, 1.0]), DMatrix::zeros(1, 2))
    }

    fn sample_point(&self, rng: &mut dyn rand::RngCore) -> (DVector<f64>, DVector<f64>) {
        let y = DVector::from_vec(vec![
            rng.gen_range(1.0..8.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-0.5..0.5),
        ]);
        (y, uniform_vec(rng, 2, -1.0, 1.0))
    }
}

pub fn make_kepler(p: &KeplerParams) -> Result<ReducedOcp> {
    p.validate()?;
    Ok(ReducedOcp {
        system: Arc::new(Kepler::new(p.k, p.m2, p.s_bar)),
        y0: DVector::from_column_slice(&p.y0),
        terminal: TerminalCondition::Fixed {
            indices: vec![0],
            values: vec![p.s_terminal],
        },
        g0: GroupElement {
            quaternions: vec![],
            angles: vec![p.theta0],
        },
        horizon: p.horizon,
    })
}

// ---------------------------------------------------------------------------
// Rigid body

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RigidBodyParams {
    pub inertia: [f64; 3],
    pub omega_ref: [f64; 3],
    pub u_ref: [f64; 3],
    pub omega0: [f64; 3],
    pub omega_terminal: [f64; 3],
    pub horizon: f64,
}

impl Default for RigidBodyParams {
    fn default() -> Self {
        Self {
            inertia: [1.0, 5.0, 10.0],
            omega_ref: [1.0, 0.0, 0.0],
            u_ref: [0.0; 3],
            omega0: [0.9, 0.5, 0.5],
            omega_terminal: [0.9, 0.5, 0.5],
            horizon: 60.0,
        }
    }
}

fn check_inertia(name: &str, v: &[f64; 3]) -> Result<()> {
    if v.iter().all(|x| x.is_finite() && *x > 0.0) {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!(
            "{name} must be componentwise > 0, got {v:?}"
        )))
    }
}

impl RigidBodyParams {
    pub fn validate(&self) -> Result<()> {
        check_inertia("rigid_body.inertia", &self.inertia)?;
        if !(self.horizon > 0.0) {
            return Err(Error::InvalidConfig("rigid_body.horizon must be > 0".into()));
        }
        Ok(())
    }
}

/// Free rigid body `I Ω̇ = IΩ × Ω + u` with principal inertias.
#[derive(Debug, Clone)]
pub struct RigidBody {
    pub inertia: Vector3<f64>,
    pub omega_ref: Vector3<f64>,
    pub u_ref: Vector3<f64>,
}

impl RigidBody {
    /// `∂(IΩ × Ω)/∂Ω = hat(IΩ) − hat(Ω) I`.
    fn gyroscopic_jacobian(&self, w: &Vector3<f64>) -> Matrix3<f64> {
        hat(&self.inertia.component_mul(w)) - hat(w) * Matrix3::from_diagonal(&self.inertia)
    }
}

impl ReducedSystem for RigidBody {
    fn name(&self) -> &'static str {
        "rigid_body"
    }
    fn state_dim(&self) -> usize {
        3
    }
    fn control_dim(&self) -> usize {
        3
    }
    fn signature(&self) -> GroupSignature {
        GroupSignature::new(1, 0)
    }

    fn dynamics(&self, y: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        let w = v3(y, 0);
        let rhs = self.inertia.component_mul(&w).cross(&w) + v3(u, 0);
        let d = rhs.component_div(&self.inertia);
        Ok(DVector::from_column_slice(d.as_slice()))
    }

    fn cost(&self, y: &DVector<f64>, u: &DVector<f64>) -> f64 {
        0.5 * ((v3(y, 0) - self.omega_ref).norm_squared() + (v3(u, 0) - self.u_ref).norm_squared())
    }

    fn group_velocity(&self, y: &DVector<f64>, _u: &DVector<f64>) -> AlgebraVector {
        AlgebraVector {
            so3: vec![v3(y, 0)],
            rates: vec![],
        }
    }

    fn dynamics_jacobian(&self, y: &DVector<f64>, _u: &DVector<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let inv = Matrix3::from_diagonal(&self.inertia.map(|x| 1.0 / x));
        let fy = inv * self.gyroscopic_jacobian(&v3(y, 0));
        Ok((
            DMatrix::from_column_slice(3, 3, fy.as_slice()),
            DMatrix::from_column_slice(3, 3, inv.as_slice()),
        ))
    }

    fn cost_gradient(&self, y: &DVector<f64>, u: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let gy = v3(y, 0) - self.omega_ref;
        let gu = v3(u, 0) - self.u_ref;
        (
            DVector::from_column_slice(gy.as_slice()),
            DVector::from_column_slice(gu.as_slice()),
        )
    }

    fn group_velocity_jacobian(&self, _y: &DVector<f64>, _u: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        (DMatrix::identity(3, 3), DMatrix::zeros(3, 3))
    }

    fn sample_point(&self, rng: &mut dyn rand::RngCore) -> (DVector<f64>, DVector<f64>) {
        (uniform_vec(rng, 3, -2.0, 2.0), uniform_vec(rng, 3, -1.0, 1.0))
    }
}

pub fn make_rigid_body(p: &RigidBodyParams) -> Result<ReducedOcp> {
    p.validate()?;
    Ok(ReducedOcp {
        system: Arc::new(RigidBody {
            inertia: Vector3::from(p.inertia),
            omega_ref: Vector3::from(p.omega_ref),
            u_ref: Vector3::from(p.u_ref),
        }),
        y0: DVector::from_column_slice(&p.omega0),
        terminal: TerminalCondition::full(&DVector::from_column_slice(&p.omega_terminal)),
        g0: GroupElement::identity(GroupSignature::new(1, 0)),
        horizon: p.horizon,
    })
}

// ---------------------------------------------------------------------------
// Rigid body with three rotors

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RotorsParams {
    pub inertia: [f64; 3],
    pub rotor_inertia: [f64; 3],
    pub omega_ref: [f64; 3],
    pub omega0: [f64; 3],
    pub v_theta0: [f64; 3],
    pub horizon: f64,
}

impl Default for RotorsParams {
    fn default() -> Self {
        Self {
            inertia: [1.0, 5.0, 10.0],
            rotor_inertia: [0.1, 0.1, 0.1],
            omega_ref: [1.0, 0.0, 0.0],
            omega0: [0.9, 0.5, 0.5],
            v_theta0: [0.0; 3],
            horizon: 60.0,
        }
    }
}

impl RotorsParams {
    pub fn validate(&self) -> Result<()> {
        check_inertia("rotors.inertia", &self.inertia)?;
        check_inertia("rotors.rotor_inertia", &self.rotor_inertia)?;
        if !(self.horizon > 0.0) {
            return Err(Error::InvalidConfig("rotors.horizon must be > 0".into()));
        }
        Ok(())
    }
}

/// Rigid body carrying three rotors, reduced by SO(3) × T³.
///
/// State `(Ω, v_θ)`, total body momentum `Π = (I + K)Ω + K v_θ`.
#[derive(Debug, Clone)]
pub struct Rotors {
    pub inertia: Vector3<f64>,
    pub rotor_inertia: Vector3<f64>,
    pub omega_ref: Vector3<f64>,
}

impl Rotors {
    pub fn momentum(&self, w: &Vector3<f64>, v: &Vector3<f64>) -> Vector3<f64> {
        (self.inertia + self.rotor_inertia).component_mul(w) + self.rotor_inertia.component_mul(v)
    }
}

impl ReducedSystem for Rotors {
    fn name(&self) -> &'static str {
        "rotors"
    }
    fn state_dim(&self) -> usize {
        6
    }
    fn control_dim(&self) -> usize {
        3
    }
    fn signature(&self) -> GroupSignature {
        GroupSignature::new(1, 3)
    }

    fn dynamics(&self, y: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        let w = v3(y, 0);
        let v = v3(y, 3);
        let u = v3(u, 0);
        let c = self.momentum(&w, &v).cross(&w).component_div(&self.inertia);
        let ui = u.component_div(&self.inertia);
        let uk = u.component_div(&self.rotor_inertia);
        let dw = c - ui;
        let dv = -c + uk + ui;
        Ok(DVector::from_iterator(6, dw.iter().chain(dv.iter()).copied()))
    }

    fn cost(&self, y: &DVector<f64>, u: &DVector<f64>) -> f64 {
        0.5 * ((v3(y, 0) - self.omega_ref).norm_squared() + u.norm_squared())
    }

    fn group_velocity(&self, y: &DVector<f64>, _u: &DVector<f64>) -> AlgebraVector {
        AlgebraVector {
            so3: vec![v3(y, 0)],
            rates: vec![y[3], y[4], y[5]],
        }
    }

    fn dynamics_jacobian(&self, y: &DVector<f64>, _u: &DVector<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let w = v3(y, 0);
        let v = v3(y, 3);
        let pi = self.momentum(&w, &v);
        let inv_i = Matrix3::from_diagonal(&self.inertia.map(|x| 1.0 / x));
        let inv_k = Matrix3::from_diagonal(&self.rotor_inertia.map(|x| 1.0 / x));
        // d(Π × Ω) = hat(Π) dΩ − hat(Ω) dΠ
        let dc_dw = hat(&pi) - hat(&w) * Matrix3::from_diagonal(&(self.inertia + self.rotor_inertia));
        let dc_dv = -hat(&w) * Matrix3::from_diagonal(&self.rotor_inertia);
        let mut fy = DMatrix::zeros(6, 6);
        fy.fixed_view_mut::<3, 3>(0, 0).copy_from(&(inv_i * dc_dw));
        fy.fixed_view_mut::<3, 3>(0, 3).copy_from(&(inv_i * dc_dv));
        fy.fixed_view_mut::<3, 3>(3, 0).copy_from(&(-inv_i * dc_dw));
        fy.fixed_view_mut::<3, 3>(3, 3).copy_from(&(-inv_i * dc_dv));
        let mut fu = DMatrix::zeros(6, 3);
        fu.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-inv_i));
        fu.fixed_view_mut::<3, 3>(3, 0).copy_from(&(inv_k + inv_i));
        Ok((fy, fu))
    }

    fn cost_gradient(&self, y: &DVector<f64>, u: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let gw = v3(y, 0) - self.omega_ref;
        let mut gy = DVector::zeros(6);
        gy.fixed_rows_mut::<3>(0).copy_from(&gw);
        (gy, u.clone())
    }

    fn group_velocity_jacobian(&self, _y: &DVector<f64>, _u: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        (DMatrix::identity(6, 6), DMatrix::zeros(6, 3))
    }

    fn sample_point(&self, rng: &mut dyn rand::RngCore) -> (DVector<f64>, DVector<f64>) {
        (uniform_vec(rng, 6, -2.0, 2.0), uniform_vec(rng, 3, -1.0, 1.0))
    }
}

pub fn make_rotors(p: &RotorsParams) -> Result<ReducedOcp> {
    p.validate()?;
    let mut y0 = DVector::zeros(6);
    y0.fixed_rows_mut::<3>(0).copy_from_slice(&p.omega0);
    y0.fixed_rows_mut::<3>(3).copy_from_slice(&p.v_theta0);
    Ok(ReducedOcp {
        system: Arc::new(Rotors {
            inertia: Vector3::from(p.inertia),
            rotor_inertia: Vector3::from(p.rotor_inertia),
            omega_ref: Vector3::from(p.omega_ref),
        }),
        y0,
        terminal: TerminalCondition::Free,
        g0: GroupElement::identity(GroupSignature::new(1, 3)),
        horizon: p.horizon,
    })
}

// ---------------------------------------------------------------------------
// Derivative self-test

fn fd_step(x: f64) -> f64 {
    1e-6 * x.abs().max(1.0)
}

fn rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1.0)
}

/// Central-difference Jacobian of a vector map.
pub fn fd_jacobian<F>(x: &DVector<f64>, out_dim: usize, mut f: F) -> Result<DMatrix<f64>>
where
    F: FnMut(&DVector<f64>) -> Result<DVector<f64>>,
{
    let mut jac = DMatrix::zeros(out_dim, x.len());
    let mut xp = x.clone();
    for j in 0..x.len() {
        let h = fd_step(x[j]);
        xp[j] = x[j] + h;
        let fp = f(&xp)?;
        xp[j] = x[j] - h;
        let fm = f(&xp)?;
        xp[j] = x[j];
        jac.set_column(j, &((fp - fm) / (2.0 * h)));
    }
    Ok(jac)
}

/// Largest relative mismatch between analytic derivatives and central
/// differences over `points` random samples.
pub fn jacobian_self_test(sys: &dyn ReducedSystem, points: usize, rng: &mut dyn rand::RngCore) -> Result<f64> {
    let n = sys.state_dim();
    let mut worst: f64 = 0.0;
    for _ in 0..points {
        let (y, u) = sys.sample_point(rng);
        let (fy, fu) = sys.dynamics_jacobian(&y, &u)?;
        let (gy, gu) = sys.cost_gradient(&y, &u);
        let (xy, xu) = sys.group_velocity_jacobian(&y, &u);
        let na = sys.signature().algebra_dim();

        let fd_fy = fd_jacobian(&y, n, |yy| sys.dynamics(yy, &u))?;
        let fd_fu = fd_jacobian(&u, n, |uu| sys.dynamics(&y, uu))?;
        let fd_gy = fd_jacobian(&y, 1, |yy| Ok(DVector::from_element(1, sys.cost(yy, &u))))?;
        let fd_gu = fd_jacobian(&u, 1, |uu| Ok(DVector::from_element(1, sys.cost(&y, uu))))?;
        let fd_xy = fd_jacobian(&y, na, |yy| Ok(sys.group_velocity(yy, &u).to_flat()))?;
        let fd_xu = fd_jacobian(&u, na, |uu| Ok(sys.group_velocity(&y, uu).to_flat()))?;

        worst = worst
            .max(rel_err(&fy, &fd_fy))
            .max(rel_err(&fu, &fd_fu))
            .max(rel_err(&DMatrix::from_row_slice(1, n, gy.as_slice()), &fd_gy))
            .max(rel_err(&DMatrix::from_row_slice(1, u.len(), gu.as_slice()), &fd_gu))
            .max(rel_err(&xy, &fd_xy))
            .max(rel_err(&xu, &fd_xu));
    }
    Ok(worst)
}

// ---------------------------------------------------------------------------
// Unreduced systems, used to exercise equivariance of the forced flows.

/// Vector field of an unreduced system with a left group action.
pub trait FullSystem {
    fn dim(&self) -> usize;
    fn control_dim(&self) -> usize;
    fn eval(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>>;
    /// `Φ_g(x)`.
    fn act(&self, g: &GroupElement, x: &DVector<f64>) -> DVector<f64>;
    /// Tangent map `dΦ_g` applied to a velocity at `x`.
    fn push_forward(&self, g: &GroupElement, x: &DVector<f64>, v: &DVector<f64>) -> DVector<f64>;
    fn sample(&self, rng: &mut dyn rand::RngCore) -> (DVector<f64>, DVector<f64>, GroupElement);
}

/// Kepler problem in `(s, θ, v_s, v_θ)` with the rotation `θ ↦ θ + α`.
#[derive(Debug, Clone)]
pub struct KeplerFull(pub Kepler);

impl FullSystem for KeplerFull {
    fn dim(&self) -> usize {
        4
    }
    fn control_dim(&self) -> usize {
        2
    }
    fn eval(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        let y = DVector::from_vec(vec![x[0], x[2], x[3]]);
        let r = self.0.dynamics(&y, u)?;
        Ok(DVector::from_vec(vec![r[0], x[3], r[1], r[2]]))
    }
    fn act(&self, g: &GroupElement, x: &DVector<f64>) -> DVector<f64> {
        let mut out = x.clone();
        out[1] += g.angles[0];
        out
    }
    fn push_forward(&self, _g: &GroupElement, _x: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
        v.clone()
    }
    fn sample(&self, rng: &mut dyn rand::RngCore) -> (DVector<f64>, DVector<f64>, GroupElement) {
        let x = DVector::from_vec(vec![
            rng.gen_range(1.0..8.0),
            rng.gen_range(-10.0..10.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-0.5..0.5),
        ]);
        let g = GroupElement {
            quaternions: vec![],
            angles: vec![rng.gen_range(-10.0..10.0)],
        };
        (x, uniform_vec(rng, 2, -1.0, 1.0), g)
    }
}

/// Rigid body on `SO(3) × R³`, state `(R column-major, Ω)`, acted on by `R ↦ QR`.
#[derive(Debug, Clone)]
pub struct RigidBodyFull(pub RigidBody);

impl RigidBodyFull {
    fn rot(x: &DVector<f64>) -> Matrix3<f64> {
        Matrix3::from_column_slice(&x.as_slice()[0..9])
    }

    fn pack(r: &Matrix3<f64>, w: &[f64]) -> DVector<f64> {
        DVector::from_iterator(12, r.iter().chain(w.iter()).copied())
    }
}

impl FullSystem for RigidBodyFull {
    fn dim(&self) -> usize {
        12
    }
    fn control_dim(&self) -> usize {
        3
    }
    fn eval(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        let r = Self::rot(x);
        let w = DVector::from_column_slice(&x.as_slice()[9..12]);
        let rdot = r * hat(&v3(&w, 0));
        let wdot = self.0.dynamics(&w, u)?;
        Ok(Self::pack(&rdot, wdot.as_slice()))
    }
    fn act(&self, g: &GroupElement, x: &DVector<f64>) -> DVector<f64> {
        let q = g.quaternions[0].to_rotation_matrix().into_inner();
        Self::pack(&(q * Self::rot(x)), &x.as_slice()[9..12])
    }
    fn push_forward(&self, g: &GroupElement, _x: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
        let q = g.quaternions[0].to_rotation_matrix().into_inner();
        Self::pack(&(q * Self::rot(v)), &v.as_slice()[9..12])
    }
    fn sample(&self, rng: &mut dyn rand::RngCore) -> (DVector<f64>, DVector<f64>, GroupElement) {
        let mut rand_rot = || {
            let axis = Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            crate::lie::quat_exp(&axis, 2.0)
        };
        let r = rand_rot().to_rotation_matrix().into_inner();
        let q = rand_rot();
        let w: Vec<f64> = (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let x = Self::pack(&r, &w);
        let g = GroupElement {
            quaternions: vec![q],
            angles: vec![],
        };
        (x, uniform_vec(rng, 3, -1.0, 1.0), g)
    }
}

/// `max ‖dΦ_g f(x, u) − f(Φ_g x, u)‖` over random trials.
pub fn equivariance_check(sys: &dyn FullSystem, trials: usize, rng: &mut dyn rand::RngCore) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let (x, u, g) = sys.sample(rng);
        let lhs = sys.push_forward(&g, &x, &sys.eval(&x, &u)?);
        let rhs = sys.eval(&sys.act(&g, &x), &u)?;
        worst = worst.max((lhs - rhs).norm());
    }
    Ok(worst)
}
