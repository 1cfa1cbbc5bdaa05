//! Linearisation of the PMP system at a static point, turnpike certification,
//! trim anchoring and exponential envelope fits.

use nalgebra::{Complex, DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::integrator::Trajectory;
use crate::lie::{group_distance, trim_flow, GroupElement};
use crate::static_solver::StaticSolution;
use crate::systems::{fd_jacobian, Kepler, ReducedOcp, ReducedSystem};

/// Default threshold for a "zero" real part.
pub const ZERO_TOL: f64 = 1e-7;
/// Threshold for zero eigenvalues of an unreduced field.
pub const SYMMETRY_ZERO_TOL: f64 = 1e-8;
const EIG_RESIDUAL_TOL: f64 = 1e-8;
const KALMAN_REL_TOL: f64 = 1e-10;
const NOISE_FLOOR: f64 = 1e-13;
const MIN_FIT_SAMPLES: usize = 10;

fn hess_step(x: f64) -> f64 {
    1e-5 * x.abs().max(1.0)
}

/// `∂H/∂y = f_yᵀp − ∇_y f⁰`.
fn h_y(sys: &dyn ReducedSystem, y: &DVector<f64>, p: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
    let (fy, _) = sys.dynamics_jacobian(y, u)?;
    let (gy, _) = sys.cost_gradient(y, u);
    Ok(fy.transpose() * p - gy)
}

/// `∂H/∂u = f_uᵀp − ∇_u f⁰`.
fn h_u(sys: &dyn ReducedSystem, y: &DVector<f64>, p: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
    let (_, fu) = sys.dynamics_jacobian(y, u)?;
    let (_, gu) = sys.cost_gradient(y, u);
    Ok(fu.transpose() * p - gu)
}

fn fd_columns<F>(x: &DVector<f64>, out_dim: usize, mut g: F) -> Result<DMatrix<f64>>
where
    F: FnMut(&DVector<f64>) -> Result<DVector<f64>>,
{
    let mut jac = DMatrix::zeros(out_dim, x.len());
    let mut xp = x.clone();
    for j in 0..x.len() {
        let h = hess_step(x[j]);
        xp[j] = x[j] + h;
        let gp = g(&xp)?;
        xp[j] = x[j] - h;
        let gm = g(&xp)?;
        xp[j] = x[j];
        jac.set_column(j, &((gp - gm) / (2.0 * h)));
    }
    Ok(jac)
}

fn asymmetry(a: &DMatrix<f64>) -> f64 {
    (a - a.transpose()).amax()
}

fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

/// Second derivatives of `H(y, p_y, u) = ⟨p_y, f⟩ − f⁰` and the linearised
/// Hamiltonian system `M = [[A, −B H_uu⁻¹ Bᵀ], [W, −Aᵀ]]`.
#[derive(Debug, Clone)]
pub struct HamiltonianBlocks {
    pub h_yy: DMatrix<f64>,
    pub h_yu: DMatrix<f64>,
    pub h_uy: DMatrix<f64>,
    pub h_uu: DMatrix<f64>,
    /// `H_{p_y y} = ∂f/∂y`.
    pub h_pyy: DMatrix<f64>,
    pub a: DMatrix<f64>,
    /// `B = H_{p_y u} = ∂f/∂u`.
    pub b: DMatrix<f64>,
    pub w: DMatrix<f64>,
    pub m: DMatrix<f64>,
    /// Largest asymmetry among `H_uu`, `W` and `H_yu − H_uyᵀ` before symmetrisation.
    pub asymmetry: f64,
}

/// Builds the blocks at `(ȳ, p̄_y, ū)` by central differences of the analytic
/// first derivatives.
pub fn build_hamiltonian_blocks(sys: &dyn ReducedSystem, sol: &StaticSolution) -> Result<HamiltonianBlocks> {
    let (y, u, p) = (&sol.y_bar, &sol.u_bar, &sol.p_bar);
    let n = sys.state_dim();
    let m = sys.control_dim();
    let h_yy = fd_columns(y, n, |yy| h_y(sys, yy, p, u))?;
    let h_uy = fd_columns(y, m, |yy| h_u(sys, yy, p, u))?;
    let h_yu = fd_columns(u, n, |uu| h_y(sys, y, p, uu))?;
    let h_uu_raw = fd_columns(u, m, |uu| h_u(sys, y, p, uu))?;
    let h_pyy = fd_columns(y, n, |yy| sys.dynamics(yy, u))?;
    let b = fd_columns(u, n, |uu| sys.dynamics(y, uu))?;

    let mut asym = asymmetry(&h_uu_raw).max((&h_yu - h_uy.transpose()).amax());
    let h_uu = symmetrize(&h_uu_raw);
    let svd = h_uu.clone().svd(false, false);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !(smin > 1e-12 * smax.max(1e-300)) {
        return Err(Error::SingularHuu);
    }
    let huu_inv = h_uu.clone().try_inverse().ok_or(Error::SingularHuu)?;

    let a = &h_pyy - &b * &huu_inv * &h_uy;
    let s = -(&b * &huu_inv * b.transpose());
    let w_raw = -&h_yy + &h_yu * &huu_inv * &h_uy;
    asym = asym.max(asymmetry(&w_raw));
    let w = symmetrize(&w_raw);

    let mut mm = DMatrix::zeros(2 * n, 2 * n);
    mm.view_mut((0, 0), (n, n)).copy_from(&a);
    mm.view_mut((0, n), (n, n)).copy_from(&symmetrize(&s));
    mm.view_mut((n, 0), (n, n)).copy_from(&w);
    mm.view_mut((n, n), (n, n)).copy_from(&(-a.transpose()));

    Ok(HamiltonianBlocks {
        h_yy,
        h_yu,
        h_uy,
        h_uu,
        h_pyy,
        a,
        b,
        w,
        m: mm,
        asymmetry: asym,
    })
}

// ---------------------------------------------------------------------------
// Dense eigenvalues

#[derive(Debug, Clone)]
pub struct Spectrum {
    pub values: Vec<Complex<f64>>,
    /// Largest `‖Mv − λv‖/‖v‖` over inverse-iteration eigenvectors.
    pub max_residual: f64,
}

impl Spectrum {
    pub fn min_abs_real(&self) -> f64 {
        self.values.iter().map(|l| l.re.abs()).fold(f64::INFINITY, f64::min)
    }

    pub fn count_below(&self, tol: f64) -> usize {
        self.values.iter().filter(|l| l.norm() < tol).count()
    }
}

/// Moves rows and columns that isolate an eigenvalue out of the active
/// block, then equilibrates the active block by powers of two.
/// Returns the isolated eigenvalues and the active block.
fn balance(m: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let mut a = m.clone();
    let n = a.nrows();
    let mut isolated = Vec::new();
    let swap = |a: &mut DMatrix<f64>, i: usize, j: usize| {
        if i != j {
            a.swap_rows(i, j);
            a.swap_columns(i, j);
        }
    };
    let mut lo = 0;
    let mut hi = n;
    // rows with no off-diagonal entries go to the bottom
    while let Some(j) = (lo..hi).rev().find(|&j| (lo..hi).all(|i| i == j || a[(j, i)] == 0.0)) {
        swap(&mut a, j, hi - 1);
        isolated.push(a[(hi - 1, hi - 1)]);
        hi -= 1;
    }
    // columns with no off-diagonal entries go to the top
    while let Some(j) = (lo..hi).find(|&j| (lo..hi).all(|i| i == j || a[(i, j)] == 0.0)) {
        swap(&mut a, j, lo);
        isolated.push(a[(lo, lo)]);
        lo += 1;
    }
    let mut block = a.view((lo, lo), (hi - lo, hi - lo)).into_owned();
    let k = block.nrows();
    const RADIX: f64 = 2.0;
    let mut converged = false;
    while !converged {
        converged = true;
        for i in 0..k {
            let mut c: f64 = (0..k).filter(|&j| j != i).map(|j| block[(j, i)].abs()).sum();
            let r: f64 = (0..k).filter(|&j| j != i).map(|j| block[(i, j)].abs()).sum();
            if c == 0.0 || r == 0.0 {
                continue;
            }
            let s = c + r;
            let mut f = 1.0;
            let mut g = r / RADIX;
            while c < g {
                f *= RADIX;
                c *= RADIX * RADIX;
            }
            g = r * RADIX;
            while c >= g {
                f /= RADIX;
                c /= RADIX * RADIX;
            }
            if (c + r) / f < 0.95 * s {
                converged = false;
                for j in 0..k {
                    block[(i, j)] /= f;
                    block[(j, i)] *= f;
                }
            }
        }
    }
    (isolated, block)
}

fn complexify(m: &DMatrix<f64>) -> DMatrix<Complex<f64>> {
    m.map(|x| Complex::new(x, 0.0))
}

/// Eigenvector residual by two steps of shifted inverse iteration.
fn eigen_residual(mc: &DMatrix<Complex<f64>>, lambda: Complex<f64>, scale: f64) -> f64 {
    let n = mc.nrows();
    let mut delta = 1e-13 * scale;
    for _ in 0..6 {
        let sigma = lambda + Complex::new(delta, delta);
        let shifted = mc - DMatrix::<Complex<f64>>::identity(n, n) * sigma;
        let lu = shifted.lu();
        let start = DVector::from_fn(n, |i, _| Complex::new(1.0 + 0.1 * i as f64, 0.3));
        if let Some(v1) = lu.solve(&start) {
            let v1 = &v1 / Complex::new(v1.norm(), 0.0);
            if let Some(v2) = lu.solve(&v1) {
                let v2n = v2.norm();
                if v2n.is_finite() && v2n > 0.0 {
                    let v = v2 / Complex::new(v2n, 0.0);
                    return (mc * &v - &v * lambda).norm();
                }
            }
        }
        delta *= 10.0;
    }
    f64::INFINITY
}

/// Full spectrum of a dense real matrix.
///
/// Balancing (permutation isolation and scaling) is followed by faer's dense
/// Hessenberg QR; every eigenvalue is checked with an inverse-iteration
/// eigenvector.
pub fn eigenvalues(m: &DMatrix<f64>) -> Result<Spectrum> {
    let n = m.nrows();
    if m.ncols() != n {
        return Err(Error::DimensionMismatch {
            what: "eigenvalue input columns",
            expected: n,
            got: m.ncols(),
        });
    }
    if m.iter().any(|x| !x.is_finite()) {
        return Err(Error::EigenNoConvergence);
    }
    let (isolated, block) = balance(m);
    let mut values: Vec<Complex<f64>> = isolated.into_iter().map(|x| Complex::new(x, 0.0)).collect();
    if block.nrows() > 0 {
        let k = block.nrows();
        let fm = faer::Mat::<f64>::from_fn(k, k, |i, j| block[(i, j)]);
        let ev = fm.eigenvalues().map_err(|_| Error::EigenNoConvergence)?;
        values.extend(ev.iter().map(|l| Complex::new(l.re, l.im)));
    }
    let mc = complexify(m);
    let scale = m.norm().max(1.0);
    let max_residual = values
        .iter()
        .map(|&l| eigen_residual(&mc, l, scale))
        .fold(0.0, f64::max);
    if !(max_residual < EIG_RESIDUAL_TOL) {
        return Err(Error::EigenResidual(max_residual));
    }
    values.sort_by(|a, b| a.re.total_cmp(&b.re).then(a.im.total_cmp(&b.im)));
    Ok(Spectrum { values, max_residual })
}

/// Largest distance in a greedy matching of `λ` with `−λ̄`.
pub fn hamiltonian_pairing_error(values: &[Complex<f64>]) -> f64 {
    let mut used = vec![false; values.len()];
    let mut worst: f64 = 0.0;
    for i in 0..values.len() {
        if used[i] {
            continue;
        }
        let target = -values[i].conj();
        let (j, d) = (0..values.len())
            .filter(|&j| !used[j] || j == i)
            .map(|j| (j, (values[j] - target).norm()))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .expect("candidate list contains i");
        used[i] = true;
        used[j] = true;
        worst = worst.max(d);
    }
    worst
}

// ---------------------------------------------------------------------------
// Certification

#[derive(Debug, Clone, Serialize)]
pub struct ComplexValue {
    pub re: f64,
    pub im: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct HyperbolicityReport {
    pub hyperbolic: bool,
    /// Smallest `|Re λ|` over the stable half; `None` when that half is empty.
    pub mu: Option<f64>,
    pub min_abs_real: f64,
    pub zero_count: usize,
    pub kalman_rank: usize,
    pub state_dim: usize,
    pub huu_negdef: bool,
    pub w_posdef: bool,
    pub pairing_error: f64,
    pub eigen_residual: f64,
    pub asymmetry: f64,
    pub zero_tol: f64,
    pub eigenvalues: Vec<ComplexValue>,
}

#[derive(Debug, Clone)]
pub struct Certification {
    pub blocks: HamiltonianBlocks,
    pub spectrum: Spectrum,
    pub report: HyperbolicityReport,
}

pub fn kalman_rank(a: &DMatrix<f64>, b: &DMatrix<f64>) -> usize {
    let n = a.nrows();
    let m = b.ncols();
    let mut ctrb = DMatrix::zeros(n, n * m);
    let mut blk = b.clone();
    for i in 0..n {
        ctrb.view_mut((0, i * m), (n, m)).copy_from(&blk);
        blk = a * blk;
    }
    let sv = ctrb.svd(false, false).singular_values;
    let smax = sv.max();
    if smax == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > KALMAN_REL_TOL * smax).count()
}

/// Checks the hypotheses of the exponential turnpike theorem at a static point.
pub fn certify(sys: &dyn ReducedSystem, sol: &StaticSolution, zero_tol: f64) -> Result<Certification> {
    let blocks = build_hamiltonian_blocks(sys, sol)?;
    let spectrum = eigenvalues(&blocks.m)?;
    let huu_eig = SymmetricEigen::new(blocks.h_uu.clone()).eigenvalues;
    let w_eig = SymmetricEigen::new(blocks.w.clone()).eigenvalues;
    let min_abs_real = spectrum.min_abs_real();
    let mu = spectrum
        .values
        .iter()
        .filter(|l| l.re < -zero_tol)
        .map(|l| -l.re)
        .fold(None, |acc: Option<f64>, x| Some(acc.map_or(x, |a| a.min(x))));
    let report = HyperbolicityReport {
        hyperbolic: min_abs_real > zero_tol,
        mu,
        min_abs_real,
        zero_count: spectrum.count_below(zero_tol),
        kalman_rank: kalman_rank(&blocks.a, &blocks.b),
        state_dim: sys.state_dim(),
        huu_negdef: huu_eig.iter().all(|&l| l < -zero_tol),
        w_posdef: w_eig.iter().all(|&l| l > zero_tol),
        pairing_error: hamiltonian_pairing_error(&spectrum.values),
        eigen_residual: spectrum.max_residual,
        asymmetry: blocks.asymmetry,
        zero_tol,
        eigenvalues: spectrum
            .values
            .iter()
            .map(|l| ComplexValue { re: l.re, im: l.im })
            .collect(),
    };
    Ok(Certification {
        blocks,
        spectrum,
        report,
    })
}

// ---------------------------------------------------------------------------
// PMP vector fields and the symmetry test

/// Solves `∂H/∂u = 0` for the control by Newton steps on finite-difference
/// `H_uu`; exact after one step for control-affine dynamics with quadratic cost.
pub fn control_from_adjoint(sys: &dyn ReducedSystem, y: &DVector<f64>, p: &DVector<f64>) -> Result<DVector<f64>> {
    let mut u = DVector::zeros(sys.control_dim());
    for _ in 0..20 {
        let g = h_u(sys, y, p, &u)?;
        if g.amax() < 1e-14 {
            break;
        }
        let huu = fd_columns(&u, u.len(), |uu| h_u(sys, y, p, uu))?;
        let step = huu.lu().solve(&g).ok_or(Error::SingularHuu)?;
        u -= step;
    }
    Ok(u)
}

/// The reduced PMP system `ẏ = f(y, u*)`, `ṗ_y = −∂H/∂y` on `z = (y, p_y)`.
pub fn reduced_pmp_field(sys: &dyn ReducedSystem, z: &DVector<f64>) -> Result<DVector<f64>> {
    let n = sys.state_dim();
    if z.len() != 2 * n {
        return Err(Error::DimensionMismatch {
            what: "PMP state",
            expected: 2 * n,
            got: z.len(),
        });
    }
    let y = z.rows(0, n).into_owned();
    let p = z.rows(n, n).into_owned();
    let u = control_from_adjoint(sys, &y, &p)?;
    let dy = sys.dynamics(&y, &u)?;
    let dp = -h_y(sys, &y, &p, &u)?;
    Ok(DVector::from_iterator(2 * n, dy.iter().chain(dp.iter()).copied()))
}

/// Unreduced Kepler PMP field on `z = (s, θ, v_s, v_θ, p_s, p_θ, p_{v_s}, p_{v_θ})`,
/// written in a frame turning at `frame_rate`, so `θ̇ = v_θ − frame_rate`.
///
/// With `frame_rate = v̄_θ` the lifted static point is a zero of the field.
pub fn kepler_full_pmp_field(kep: &Kepler, frame_rate: f64, z: &DVector<f64>) -> Result<DVector<f64>> {
    if z.len() != 8 {
        return Err(Error::DimensionMismatch {
            what: "Kepler full PMP state",
            expected: 8,
            got: z.len(),
        });
    }
    let red = DVector::from_vec(vec![z[0], z[2], z[3], z[4], z[6], z[7]]);
    let h = reduced_pmp_field(kep, &red)?;
    let p_theta = z[5];
    Ok(DVector::from_vec(vec![
        h[0],
        z[3] - frame_rate,
        h[1],
        h[2],
        h[3],
        0.0,
        h[4],
        // θ̇ = v_θ contributes p_θ·v_θ to H
        h[5] - p_theta,
    ]))
}

/// Lifts a reduced Kepler PMP point `(y, p_y)` to the unreduced coordinates.
pub fn kepler_lift(y: &DVector<f64>, p: &DVector<f64>, theta: f64, p_theta: f64) -> DVector<f64> {
    DVector::from_vec(vec![y[0], theta, y[1], y[2], p[0], p_theta, p[1], p[2]])
}

/// Number of eigenvalues with `|λ| < 1e-8` of the Jacobian of `field` at a
/// critical point.
pub fn symmetry_zero_eigen_test<F>(field: F, critical_point: &DVector<f64>) -> Result<usize>
where
    F: Fn(&DVector<f64>) -> Result<DVector<f64>>,
{
    let h0 = field(critical_point)?;
    let residual = h0.amax();
    if !(residual <= SYMMETRY_ZERO_TOL) {
        return Err(Error::NotCritical(residual));
    }
    let jac = fd_jacobian(critical_point, h0.len(), &field)?;
    let spectrum = eigenvalues(&jac)?;
    Ok(spectrum.count_below(SYMMETRY_ZERO_TOL))
}

// ---------------------------------------------------------------------------
// Trim anchoring and deviation series

fn nearest_index(times: &[f64], t: f64) -> usize {
    times
        .iter()
        .enumerate()
        .min_by(|a, b| (a.1 - t).abs().total_cmp(&(b.1 - t).abs()))
        .map(|(i, _)| i)
        .unwrap_or(0)
}

/// Trim motion through the reconstructed group element at the node nearest
/// `T/2`, with velocity `ξ(ȳ, ū)`.
pub fn anchor_trim(ocp: &ReducedOcp, traj: &Trajectory, sol: &StaticSolution) -> Result<Vec<GroupElement>> {
    let group = traj.group.as_ref().ok_or(Error::MissingGroup)?;
    if group.len() != traj.times.len() {
        return Err(Error::GridMismatch(format!(
            "{} group samples for {} nodes",
            group.len(),
            traj.times.len()
        )));
    }
    let mid = nearest_index(&traj.times, 0.5 * ocp.horizon);
    let xi = ocp.system.group_velocity(&sol.y_bar, &sol.u_bar);
    let t_mid = traj.times[mid];
    traj.times
        .iter()
        .map(|&t| trim_flow(&group[mid], &xi, t - t_mid))
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct DeviationSeries {
    pub times: Vec<f64>,
    /// `‖y − ȳ‖ + ‖p_y − p̄_y‖ + ‖u − ū‖`, the middle term only when
    /// `adjoint_included`.
    pub reduced: Vec<f64>,
    pub adjoint_included: bool,
    /// Distance to the anchored trim, when a trim was supplied.
    pub group: Option<Vec<f64>>,
}

pub fn deviation_series(
    traj: &Trajectory,
    sol: &StaticSolution,
    trim: Option<&[GroupElement]>,
    include_adjoint: bool,
) -> Result<DeviationSeries> {
    let nodes = traj.times.len();
    if traj.states.len() != nodes || traj.controls.is_empty() {
        return Err(Error::GridMismatch("trajectory nodes and states differ".into()));
    }
    let adjoints = if include_adjoint { traj.adjoints.as_ref() } else { None };
    if let Some(p) = adjoints {
        if p.len() != nodes {
            return Err(Error::GridMismatch("adjoints do not match the grid".into()));
        }
    }
    let reduced = (0..nodes)
        .map(|k| {
            let mut e = (&traj.states[k] - &sol.y_bar).norm() + (traj.control_at_node(k) - &sol.u_bar).norm();
            if let Some(p) = adjoints {
                e += (&p[k] - &sol.p_bar).norm();
            }
            e
        })
        .collect();
    let group = match trim {
        None => None,
        Some(tr) => {
            let g = traj.group.as_ref().ok_or(Error::MissingGroup)?;
            if tr.len() != nodes || g.len() != nodes {
                return Err(Error::GridMismatch("trim and trajectory grids differ".into()));
            }
            Some(
                g.iter()
                    .zip(tr)
                    .map(|(a, b)| group_distance(a, b))
                    .collect::<Result<Vec<_>>>()?,
            )
        }
    };
    Ok(DeviationSeries {
        times: traj.times.clone(),
        reduced,
        adjoint_included: adjoints.is_some(),
        group,
    })
}

// ---------------------------------------------------------------------------
// Envelope fit

#[derive(Debug, Clone, Serialize)]
pub struct EnvelopeFit {
    pub c_hat: f64,
    pub mu_hat: f64,
    pub mu_in: f64,
    pub mu_out: f64,
    pub c_in: f64,
    pub c_out: f64,
    /// The smaller of the two window fits.
    pub r_squared: f64,
    pub r_squared_in: f64,
    pub r_squared_out: f64,
    pub samples_in: usize,
    pub samples_out: usize,
    pub reliable: bool,
    pub plateau: f64,
}

/// Least-squares line `v = a + b·x`; returns `(a, b, r²)`.
fn line_fit(x: &[f64], v: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let mv = v.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let sxv: f64 = x.iter().zip(v).map(|(a, b)| (a - mx) * (b - mv)).sum();
    let svv: f64 = v.iter().map(|b| (b - mv).powi(2)).sum();
    let slope = if sxx > 0.0 { sxv / sxx } else { 0.0 };
    let intercept = mv - slope * mx;
    // a flat series leaves only rounding in svv
    let flat = svv <= 1e-20 * v.iter().map(|b| b * b).sum::<f64>();
    let r2 = if !flat && sxx > 0.0 {
        (sxv * sxv / (sxx * svv)).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (intercept, slope, r2)
}

fn window(times: &[f64], eps: &[f64], lo: f64, hi: f64, slack: f64) -> (Vec<f64>, Vec<f64>) {
    times
        .iter()
        .zip(eps)
        .filter(|(t, e)| **t >= lo - slack && **t <= hi + slack && **e >= NOISE_FLOOR && e.is_finite())
        .map(|(t, e)| (*t, e.ln()))
        .unzip()
}

/// Fractions of the horizon used by the envelope fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitWindows {
    pub entry: [f64; 2],
    pub exit: [f64; 2],
    pub plateau: [f64; 2],
}

impl Default for FitWindows {
    fn default() -> Self {
        Self {
            entry: [0.05, 0.45],
            exit: [0.55, 0.95],
            plateau: [0.4, 0.6],
        }
    }
}

impl FitWindows {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("entry", self.entry), ("exit", self.exit), ("plateau", self.plateau)] {
            if !(w[0].is_finite() && w[1].is_finite() && 0.0 <= w[0] && w[0] < w[1] && w[1] <= 1.0) {
                return Err(Error::InvalidConfig(format!(
                    "analysis.windows.{name} must satisfy 0 <= lo < hi <= 1"
                )));
            }
        }
        Ok(())
    }
}

/// Fits `C e^{−μ t}` on `[0.05T, 0.45T]` and `C e^{−μ (T−t)}` on
/// `[0.55T, 0.95T]` to a deviation series.
pub fn fit_envelope(times: &[f64], eps: &[f64], horizon: f64) -> Result<EnvelopeFit> {
    fit_envelope_in(times, eps, horizon, &FitWindows::default())
}

/// [`fit_envelope`] with custom windows.
pub fn fit_envelope_in(times: &[f64], eps: &[f64], horizon: f64, windows: &FitWindows) -> Result<EnvelopeFit> {
    windows.validate()?;
    if times.len() != eps.len() {
        return Err(Error::GridMismatch("times and deviations differ in length".into()));
    }
    if eps.iter().any(|e| *e < 0.0) {
        return Err(Error::InvalidConfig("deviation series must be non-negative".into()));
    }
    let slack = 1e-9 * horizon;
    let [e0, e1] = windows.entry;
    let [x0, x1] = windows.exit;
    let [p0, p1] = windows.plateau;
    let (t_in, l_in) = window(times, eps, e0 * horizon, e1 * horizon, slack);
    let (t_out, l_out) = window(times, eps, x0 * horizon, x1 * horizon, slack);
    let fit = |t: &[f64], l: &[f64]| {
        if t.len() < 2 {
            (f64::NAN, f64::NAN, 0.0)
        } else {
            line_fit(t, l)
        }
    };
    let (a_in, b_in, r2_in) = fit(&t_in, &l_in);
    let mirrored: Vec<f64> = t_out.iter().map(|t| horizon - t).collect();
    let (a_out, b_out, r2_out) = fit(&mirrored, &l_out);
    let (mu_in, mu_out) = (-b_in, -b_out);
    let plateau = times
        .iter()
        .zip(eps)
        .filter(|(t, _)| **t >= p0 * horizon - slack && **t <= p1 * horizon + slack)
        .map(|(_, e)| *e)
        .fold(0.0, f64::max);
    Ok(EnvelopeFit {
        c_hat: a_in.exp().max(a_out.exp()),
        mu_hat: mu_in.min(mu_out),
        mu_in,
        mu_out,
        c_in: a_in.exp(),
        c_out: a_out.exp(),
        r_squared: r2_in.min(r2_out),
        r_squared_in: r2_in,
        r_squared_out: r2_out,
        samples_in: t_in.len(),
        samples_out: t_out.len(),
        reliable: t_in.len() >= MIN_FIT_SAMPLES && t_out.len() >= MIN_FIT_SAMPLES,
        plateau,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::integrator::{reconstruct_group, rollout, ControlGrid};
    use crate::static_solver::{solve_static, StaticGuess};
    use crate::systems::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn dv(v: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(v)
    }

    fn kepler_static() -> (ReducedOcp, StaticSolution) {
        let ocp = make_kepler(&KeplerParams::default()).unwrap();
        let g = StaticGuess::new(dv(&[4.5, 0.0, circular_rate(1.0, 4.5)]), dv(&[0.0, 0.0]));
        let sol = solve_static(ocp.system.as_ref(), &g).unwrap();
        (ocp, sol)
    }

    fn rigid_static() -> (ReducedOcp, StaticSolution) {
        let ocp = make_rigid_body(&RigidBodyParams::default()).unwrap();
        let g = StaticGuess::new(dv(&[1.0, 0.0, 0.0]), dv(&[0.0; 3]));
        let sol = solve_static(ocp.system.as_ref(), &g).unwrap();
        (ocp, sol)
    }

    fn rotors_static() -> (ReducedOcp, StaticSolution) {
        let ocp = make_rotors(&RotorsParams::default()).unwrap();
        let g = StaticGuess::new(dv(&[1.0, 0.0, 0.0, 0.0, 0.0, 0.0]), dv(&[0.0; 3]));
        let sol = solve_static(ocp.system.as_ref(), &g).unwrap();
        (ocp, sol)
    }

    fn sorted_re(s: &Spectrum) -> Vec<f64> {
        let mut v: Vec<f64> = s.values.iter().map(|l| l.re).collect();
        v.sort_by(f64::total_cmp);
        v
    }

    #[test]
    fn eigen_examples() {
        let s = eigenvalues(&DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0])).unwrap();
        assert_eq!(sorted_re(&s), vec![-1.0, 1.0]);

        let s = eigenvalues(&DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0])).unwrap();
        let mut im: Vec<f64> = s.values.iter().map(|l| l.im).collect();
        im.sort_by(f64::total_cmp);
        assert_relative_eq!(im[0], -1.0, epsilon = 1e-14);
        assert_relative_eq!(im[1], 1.0, epsilon = 1e-14);
        assert!(s.values.iter().all(|l| l.re.abs() < 1e-14));

        // companion of (λ−1)(λ−2)(λ−3) = λ³ − 6λ² + 11λ − 6
        let c = DMatrix::from_row_slice(3, 3, &[6.0, -11.0, 6.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        let s = eigenvalues(&c).unwrap();
        for (got, want) in sorted_re(&s).iter().zip([1.0, 2.0, 3.0]) {
            assert!((got - want).abs() < 1e-10, "{got} vs {want}");
        }
        assert!(s.values.iter().all(|l| l.im.abs() < 1e-10));
    }

    #[test]
    fn eigen_rejects_non_finite() {
        let m = DMatrix::from_row_slice(2, 2, &[f64::NAN, 0.0, 0.0, 1.0]);
        assert!(eigenvalues(&m).is_err());
    }

    #[test]
    fn balancing_isolates_exact_zero_structure() {
        // zero column and zero row with a coupling that forms a Jordan chain
        let m = DMatrix::from_row_slice(
            4,
            4,
            &[
                0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, -1.0, 2.0, 0.0, 1.0, 0.5, 3.0,
            ],
        );
        let s = eigenvalues(&m).unwrap();
        assert_eq!(s.count_below(1e-12), 2);
    }

    fn det_poly_oracle(m: &DMatrix<f64>, l: Complex<f64>) -> f64 {
        let n = m.nrows();
        let c = complexify(m) - DMatrix::<Complex<f64>>::identity(n, n) * l;
        c.determinant().norm()
    }

    proptest! {
        #[test]
        fn random_hamiltonian_spectra_pair(entries in proptest::collection::vec(-2.0f64..2.0, 27)) {
            let a = DMatrix::from_row_slice(3, 3, &entries[0..9]);
            let s = DMatrix::from_row_slice(3, 3, &entries[9..18]);
            let w = DMatrix::from_row_slice(3, 3, &entries[18..27]);
            let s = symmetrize(&s);
            let w = symmetrize(&w);
            let mut m = DMatrix::zeros(6, 6);
            m.view_mut((0, 0), (3, 3)).copy_from(&a);
            m.view_mut((0, 3), (3, 3)).copy_from(&s);
            m.view_mut((3, 0), (3, 3)).copy_from(&w);
            m.view_mut((3, 3), (3, 3)).copy_from(&(-a.transpose()));
            if let Ok(sp) = eigenvalues(&m) {
                prop_assert!(hamiltonian_pairing_error(&sp.values) < 1e-6);
                for l in &sp.values {
                    // each eigenvalue is a root of det(M − λI)
                    prop_assert!(det_poly_oracle(&m, *l) < 1e-6 * m.norm().powi(6).max(1.0));
                }
            }
        }

        #[test]
        fn symmetry_multiplicity_is_scale_invariant(scale in 0.1f64..10.0) {
            let (ocp, sol) = kepler_static();
            let kep = kepler_of(&ocp);
            let z = kepler_lift(&sol.y_bar, &sol.p_bar, 0.3, 0.0);
            let rate = sol.y_bar[2];
            let base = symmetry_zero_eigen_test(|x| kepler_full_pmp_field(&kep, rate, x), &z).unwrap();
            let scaled = symmetry_zero_eigen_test(|x| Ok(kepler_full_pmp_field(&kep, rate, x)? * scale), &z).unwrap();
            prop_assert_eq!(base, scaled);
        }
    }

    fn kepler_of(ocp: &ReducedOcp) -> Kepler {
        let _ = ocp;
        let p = KeplerParams::default();
        Kepler {
            k: p.k,
            m2: p.m2,
            y_ref: dv(&[p.s_bar, 0.0, circular_rate(p.k, p.s_bar)]),
        }
    }

    #[test]
    fn tracking_costs_give_minus_identity_huu() {
        for (ocp, sol) in [kepler_static(), rigid_static(), rotors_static()] {
            let b = build_hamiltonian_blocks(ocp.system.as_ref(), &sol).unwrap();
            let m = ocp.m();
            assert!(
                (&b.h_uu + DMatrix::identity(m, m)).amax() < 1e-8,
                "{}",
                ocp.system.name()
            );
            assert!(b.asymmetry < 1e-8);
        }
    }

    #[test]
    fn kepler_control_matrix() {
        let (ocp, sol) = kepler_static();
        let b = build_hamiltonian_blocks(ocp.system.as_ref(), &sol).unwrap();
        let s = 4.5;
        let want = DMatrix::from_row_slice(3, 2, &[0.0, 0.0, 1.0, 0.0, 0.0, 1.0 / (s * s)]);
        assert!((&b.b - want).amax() < 1e-9);
    }

    #[test]
    fn certification_verdicts() {
        let (ocp, sol) = kepler_static();
        let c = certify(ocp.system.as_ref(), &sol, ZERO_TOL).unwrap();
        assert!(c.report.hyperbolic && c.report.zero_count == 0);
        assert!(c.report.huu_negdef && c.report.kalman_rank == 3);
        assert!((c.report.mu.unwrap() - 0.0678).abs() < 1e-3, "{:?}", c.report.mu);
        assert!(c.report.pairing_error < 1e-8);

        let (ocp, sol) = rigid_static();
        let c = certify(ocp.system.as_ref(), &sol, ZERO_TOL).unwrap();
        assert!(c.report.hyperbolic);
        assert!((c.report.mu.unwrap() - 0.1608).abs() < 1e-3, "{:?}", c.report.mu);
        assert!(c.report.pairing_error < 1e-8);

        let (ocp, sol) = rotors_static();
        let c = certify(ocp.system.as_ref(), &sol, ZERO_TOL).unwrap();
        assert!(!c.report.hyperbolic);
        assert!(c.report.zero_count >= 1);
        assert!(c.report.pairing_error < 1e-8);
    }

    #[test]
    fn singular_huu_is_reported() {
        // a cost with no control penalty makes H_uu vanish
        #[derive(Debug)]
        struct NoPenalty(RigidBody);
        impl ReducedSystem for NoPenalty {
            fn name(&self) -> &'static str {
                "no-penalty"
            }
            fn state_dim(&self) -> usize {
                3
            }
            fn control_dim(&self) -> usize {
                3
            }
            fn signature(&self) -> crate::lie::GroupSignature {
                self.0.signature()
            }
            fn dynamics(&self, y: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
                self.0.dynamics(y, u)
            }
            fn cost(&self, y: &DVector<f64>, _u: &DVector<f64>) -> f64 {
                0.5 * (y - dv(&[1.0, 0.0, 0.0])).norm_squared()
            }
            fn group_velocity(&self, y: &DVector<f64>, u: &DVector<f64>) -> crate::lie::AlgebraVector {
                self.0.group_velocity(y, u)
            }
            fn dynamics_jacobian(&self, y: &DVector<f64>, u: &DVector<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
                self.0.dynamics_jacobian(y, u)
            }
            fn cost_gradient(&self, y: &DVector<f64>, _u: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
                (y - dv(&[1.0, 0.0, 0.0]), DVector::zeros(3))
            }
            fn group_velocity_jacobian(&self, y: &DVector<f64>, u: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
                self.0.group_velocity_jacobian(y, u)
            }
            fn sample_point(&self, rng: &mut dyn rand::RngCore) -> (DVector<f64>, DVector<f64>) {
                self.0.sample_point(rng)
            }
        }
        let (_, sol) = rigid_static();
        let sys = NoPenalty(RigidBody {
            inertia: nalgebra::Vector3::new(1.0, 5.0, 10.0),
            omega_ref: nalgebra::Vector3::x(),
            u_ref: nalgebra::Vector3::zeros(),
        });
        assert!(matches!(build_hamiltonian_blocks(&sys, &sol), Err(Error::SingularHuu)));
    }

    #[test]
    fn kalman_rank_examples() {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        assert_eq!(kalman_rank(&a, &DMatrix::from_column_slice(2, 1, &[0.0, 1.0])), 2);
        assert_eq!(kalman_rank(&a, &DMatrix::from_column_slice(2, 1, &[1.0, 0.0])), 1);
    }

    #[test]
    fn symmetry_zero_eigenvalues() {
        let (ocp, sol) = kepler_static();
        let kep = kepler_of(&ocp);
        let rate = sol.y_bar[2];
        let z = kepler_lift(&sol.y_bar, &sol.p_bar, 1.7, 0.0);
        let full = symmetry_zero_eigen_test(|x| kepler_full_pmp_field(&kep, rate, x), &z).unwrap();
        assert!(full >= 1, "full field zero count {full}");

        let zr = DVector::from_iterator(6, sol.y_bar.iter().chain(sol.p_bar.iter()).copied());
        let reduced = symmetry_zero_eigen_test(|x| reduced_pmp_field(&kep, x), &zr).unwrap();
        assert_eq!(reduced, 0);

        // in the inertial frame the lifted point drifts in θ and is rejected
        assert!(matches!(
            symmetry_zero_eigen_test(|x| kepler_full_pmp_field(&kep, 0.0, x), &z),
            Err(Error::NotCritical(_))
        ));
    }

    #[test]
    fn reduced_field_matches_explicit_kepler_pmp() {
        // ṗ from direct differentiation of H for the Kepler model
        let kep = kepler_of(&kepler_static().0);
        let z = dv(&[4.8, 0.1, 0.09, 0.2, -0.3, 0.4]);
        let (s, vs, vt, ps, pvs, pvt) = (z[0], z[1], z[2], z[3], z[4], z[5]);
        let (k, sb, vb) = (1.0, 4.5, circular_rate(1.0, 4.5));
        let u1 = pvs;
        let u2 = pvt / (s * s);
        let want = [
            vs,
            s * vt * vt - k / (s * s) + u1,
            -2.0 * vt * vs / s + u2 / (s * s),
            -(pvs * (vt * vt + 2.0 * k / s.powi(3)) + pvt * (2.0 * vt * vs / (s * s) - 2.0 * u2 / s.powi(3)))
                + (s - sb),
            -(ps - pvt * 2.0 * vt / s) + vs,
            -(pvs * 2.0 * s * vt - pvt * 2.0 * vs / s) + (vt - vb),
        ];
        let got = reduced_pmp_field(&kep, &z).unwrap();
        for (g, w) in got.iter().zip(want) {
            assert!((g - w).abs() < 1e-12, "{g} vs {w}");
        }
    }

    #[test]
    fn envelope_fit_synthetic() {
        let t_h = 40.0;
        let times: Vec<f64> = (0..=400).map(|i| i as f64 * 0.1).collect();
        let eps: Vec<f64> = times
            .iter()
            .map(|t| 3.0 * ((-0.7 * t).exp() + (-0.7 * (t_h - t)).exp()))
            .collect();
        let fit = fit_envelope(&times, &eps, t_h).unwrap();
        assert!((fit.mu_hat - 0.7).abs() < 0.02);
        assert!((fit.c_hat - 3.0).abs() < 0.1);
        assert!(fit.reliable && fit.r_squared > 0.99);

        let flat = vec![0.5; times.len()];
        let fit = fit_envelope(&times, &flat, t_h).unwrap();
        assert!(fit.mu_hat.abs() < 1e-12);
        assert_eq!(fit.r_squared, 0.0);
        assert_eq!(fit.plateau, 0.5);
    }

    #[test]
    fn envelope_fit_flags_sparse_windows() {
        let times: Vec<f64> = (0..=8).map(|i| i as f64 * 5.0).collect();
        let eps: Vec<f64> = times.iter().map(|t| (-0.5 * t).exp()).collect();
        assert!(!fit_envelope(&times, &eps, 40.0).unwrap().reliable);
        let zeros = vec![0.0; times.len()];
        assert!(!fit_envelope(&times, &zeros, 40.0).unwrap().reliable);
    }

    #[test]
    fn on_trim_solution_has_zero_deviation() {
        let (mut ocp, sol) = kepler_static();
        ocp.y0 = sol.y_bar.clone();
        let grid = ControlGrid::constant(ocp.horizon, 40, &sol.u_bar).unwrap();
        let traj = reconstruct_group(&ocp, &rollout(&ocp, &grid, 4).unwrap()).unwrap();
        let trim = anchor_trim(&ocp, &traj, &sol).unwrap();
        let dev = deviation_series(&traj, &sol, Some(&trim), false).unwrap();
        assert!(dev.reduced.iter().all(|e| *e < 1e-12));
        assert!(dev.group.unwrap().iter().all(|e| *e < 1e-10));
        // θ̄ is the line through (T/2, θ(T/2)) with slope v̄_θ
        let mid = 20;
        for (k, g) in trim.iter().enumerate() {
            let want = traj.group.as_ref().unwrap()[mid].angles[0] + sol.y_bar[2] * (traj.times[k] - traj.times[mid]);
            assert!((g.angles[0] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn anchoring_zeroes_group_deviation_at_midpoint() {
        let (ocp, sol) = rigid_static();
        let grid = ControlGrid::new(
            ocp.horizon,
            DMatrix::from_fn(60, 3, |i, j| ((i * 3 + j) as f64).sin() * 0.1),
        )
        .unwrap();
        let traj = reconstruct_group(&ocp, &rollout(&ocp, &grid, 4).unwrap()).unwrap();
        let trim = anchor_trim(&ocp, &traj, &sol).unwrap();
        let dev = deviation_series(&traj, &sol, Some(&trim), false).unwrap();
        assert_eq!(dev.group.unwrap()[30], 0.0);
    }

    #[test]
    fn anchoring_requires_group() {
        let (ocp, sol) = rigid_static();
        let grid = ControlGrid::constant(ocp.horizon, 10, &sol.u_bar).unwrap();
        let traj = rollout(&ocp, &grid, 4).unwrap();
        assert!(matches!(anchor_trim(&ocp, &traj, &sol), Err(Error::MissingGroup)));
    }
}
