//! The static problem `min f⁰(y, u)` subject to `f(y, u) = 0`.
//!
//! Solved by damped Newton on the KKT system of the Lagrangian `f⁰ + pᵀf`. The
//! multiplier is reported with the sign of the PMP adjoint of
//! `H = ⟨p_y, f⟩ − f⁰`, i.e. `p̄_y = −p`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::systems::{fd_jacobian, ReducedSystem};

const MAX_ITER: usize = 100;
const TOL: f64 = 1e-10;
const MIN_STEP: f64 = 1e-6;
/// Condition estimate above which the Newton step is taken in the
/// least-squares sense.
const COND_LIMIT: f64 = 1e12;

#[derive(Debug, Clone, PartialEq)]
pub struct StaticSolution {
    pub y_bar: DVector<f64>,
    pub u_bar: DVector<f64>,
    /// Adjoint turnpike `p̄_y` (PMP sign convention).
    pub p_bar: DVector<f64>,
    pub residual_dyn: f64,
    pub residual_kkt: f64,
    pub iterations: usize,
    /// Condition estimate of the KKT Jacobian at the solution.
    pub kkt_condition: f64,
}

/// Initial point for [`solve_static`]; `p` uses the Lagrangian sign.
#[derive(Debug, Clone)]
pub struct StaticGuess {
    pub y: DVector<f64>,
    pub u: DVector<f64>,
    pub p: DVector<f64>,
}

impl StaticGuess {
    /// Guess with zero multiplier.
    pub fn new(y: DVector<f64>, u: DVector<f64>) -> Self {
        let n = y.len();
        Self {
            y,
            u,
            p: DVector::zeros(n),
        }
    }
}

struct Kkt<'a> {
    sys: &'a dyn ReducedSystem,
    n: usize,
    m: usize,
}

impl Kkt<'_> {
    fn split(&self, z: &DVector<f64>) -> (DVector<f64>, DVector<f64>, DVector<f64>) {
        (
            z.rows(0, self.n).into_owned(),
            z.rows(self.n, self.m).into_owned(),
            z.rows(self.n + self.m, self.n).into_owned(),
        )
    }

    /// `(∇_y f⁰ + f_yᵀp, ∇_u f⁰ + f_uᵀp, f)`.
    fn residual(&self, z: &DVector<f64>) -> Result<DVector<f64>> {
        let (y, u, p) = self.split(z);
        let (fy, fu) = self.sys.dynamics_jacobian(&y, &u)?;
        let (gy, gu) = self.sys.cost_gradient(&y, &u);
        let f = self.sys.dynamics(&y, &u)?;
        let ry = gy + fy.transpose() * &p;
        let ru = gu + fu.transpose() * &p;
        Ok(DVector::from_iterator(
            2 * self.n + self.m,
            ry.iter().chain(ru.iter()).chain(f.iter()).copied(),
        ))
    }

    fn norms(&self, r: &DVector<f64>) -> (f64, f64) {
        let kkt = r.rows(0, self.n + self.m).norm();
        let dynamics = r.rows(self.n + self.m, self.n).norm();
        (dynamics, kkt)
    }
}

fn condition(j: &DMatrix<f64>) -> f64 {
    let sv = j.clone().singular_values();
    let max = sv.max();
    let min = sv.min();
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Minimum-norm solution of `j x = b` with singular values below
/// `1e-12 σ_max` discarded.
fn pseudo_solve(j: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    let svd = j.clone().svd(true, true);
    let eps = 1e-12 * svd.singular_values.max();
    svd.solve(b, eps).ok()
}

/// Damped Newton on the KKT system.
pub fn solve_static(sys: &dyn ReducedSystem, guess: &StaticGuess) -> Result<StaticSolution> {
    let n = sys.state_dim();
    let m = sys.control_dim();
    if guess.y.len() != n || guess.u.len() != m || guess.p.len() != n {
        return Err(Error::DimensionMismatch {
            what: "static guess",
            expected: 2 * n + m,
            got: guess.y.len() + guess.u.len() + guess.p.len(),
        });
    }
    let kkt = Kkt { sys, n, m };
    let dim = 2 * n + m;
    let mut z = DVector::from_iterator(dim, guess.y.iter().chain(guess.u.iter()).chain(guess.p.iter()).copied());
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidConfig("static guess must be finite".into()));
    }
    let mut r = kkt.residual(&z)?;
    let mut iterations = 0;

    loop {
        let (rd, rk) = kkt.norms(&r);
        let jac = fd_jacobian(&z, dim, |zz| kkt.residual(zz))?;
        let cond = condition(&jac);
        if rd < TOL && rk < TOL {
            let (y, u, p) = kkt.split(&z);
            log::debug!("static solve converged in {iterations} iterations");
            return Ok(StaticSolution {
                y_bar: y,
                u_bar: u,
                p_bar: -p,
                residual_dyn: rd,
                residual_kkt: rk,
                iterations,
                kkt_condition: cond,
            });
        }
        if iterations >= MAX_ITER {
            return Err(Error::StaticNotConverged {
                iterations,
                residual_dyn: rd,
                residual_kkt: rk,
            });
        }
        iterations += 1;

        let neg_r = -&r;
        let step = if cond < COND_LIMIT {
            jac.clone().lu().solve(&neg_r)
        } else {
            None
        }
        .or_else(|| pseudo_solve(&jac, &neg_r))
        .ok_or(Error::SingularKkt { condition: cond })?;

        // Backtracking on the residual norm.
        let r_norm = r.norm();
        let mut alpha = 1.0;
        let accepted = loop {
            let trial = &z + &step * alpha;
            if let Ok(rt) = kkt.residual(&trial) {
                if rt.norm() < r_norm {
                    break Some((trial, rt));
                }
            }
            alpha *= 0.5;
            if alpha < MIN_STEP {
                break None;
            }
        };
        match accepted {
            Some((zt, rt)) => {
                z = zt;
                r = rt;
            }
            None if cond >= COND_LIMIT => return Err(Error::SingularKkt { condition: cond }),
            None => {
                return Err(Error::StaticNotConverged {
                    iterations,
                    residual_dyn: rd,
                    residual_kkt: rk,
                })
            }
        }
    }
}

/// Re-anchors a static solution inside a degenerate solution family: the
/// component of `y_target − ȳ` lying in the null space of the KKT Jacobian is
/// added to `ȳ`, and Newton is rerun from there. For a unique solution
/// (regular KKT Jacobian) the input is returned unchanged.
pub fn anchor_static_family(
    sys: &dyn ReducedSystem,
    sol: &StaticSolution,
    y_target: &DVector<f64>,
) -> Result<StaticSolution> {
    let n = sys.state_dim();
    let m = sys.control_dim();
    let kkt = Kkt { sys, n, m };
    let dim = 2 * n + m;
    let z = DVector::from_iterator(
        dim,
        sol.y_bar
            .iter()
            .chain(sol.u_bar.iter())
            .chain(sol.p_bar.iter().map(|p| -p).collect::<Vec<_>>().iter())
            .copied(),
    );
    let jac = fd_jacobian(&z, dim, |zz| kkt.residual(zz))?;
    let svd = jac.svd(false, true);
    let v_t = svd.v_t.expect("requested V");
    let smax = svd.singular_values.max();
    let mut shift = DVector::zeros(dim);
    let mut delta = DVector::zeros(dim);
    delta.rows_mut(0, n).copy_from(&(y_target - &sol.y_bar));
    for (i, s) in svd.singular_values.iter().enumerate() {
        if *s <= 1e-8 * smax {
            let v = v_t.row(i).transpose();
            shift += &v * v.dot(&delta);
        }
    }
    if shift.norm() == 0.0 {
        return Ok(sol.clone());
    }
    let zt = z + shift;
    let guess = StaticGuess {
        y: zt.rows(0, n).into_owned(),
        u: zt.rows(n, m).into_owned(),
        p: zt.rows(n + m, n).into_owned(),
    };
    solve_static(sys, &guess)
}

/// Axis-aligned box in `(y, u)` space.
#[derive(Debug, Clone)]
pub struct SearchBox {
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

/// Best grid point found by [`static_bruteforce_oracle`].
#[derive(Debug, Clone)]
pub struct OracleResult {
    pub y: DVector<f64>,
    pub u: DVector<f64>,
    pub cost: f64,
    /// Grid spacing per `(y, u)` coordinate.
    pub spacing: DVector<f64>,
}

impl OracleResult {
    /// Whether `(y, u)` lies within one grid cell of the oracle point.
    pub fn within_one_cell(&self, y: &DVector<f64>, u: &DVector<f64>) -> bool {
        let n = y.len();
        (0..n).all(|i| (y[i] - self.y[i]).abs() <= self.spacing[i] + 1e-12)
            && (0..u.len()).all(|j| (u[j] - self.u[j]).abs() <= self.spacing[n + j] + 1e-12)
    }
}

/// Exhaustive grid search of the static problem: among grid points whose
/// dynamics residual is within a first-order bound of a feasible point in the
/// same cell, return the one with the smallest cost. Independent of Newton.
pub fn static_bruteforce_oracle(sys: &dyn ReducedSystem, bounds: &SearchBox, grid_pts: usize) -> Result<OracleResult> {
    let n = sys.state_dim();
    let m = sys.control_dim();
    let d = n + m;
    if bounds.lower.len() != d || bounds.upper.len() != d {
        return Err(Error::DimensionMismatch {
            what: "search box",
            expected: d,
            got: bounds.lower.len(),
        });
    }
    if grid_pts < 11 {
        return Err(Error::InvalidConfig(
            "oracle needs at least 11 points per dimension".into(),
        ));
    }
    let spacing = (&bounds.upper - &bounds.lower) / (grid_pts - 1) as f64;
    let half_diag = 0.5 * spacing.norm();
    let total = grid_pts.pow(d as u32);
    let mut idx = vec![0usize; d];
    let mut best: Option<(f64, DVector<f64>)> = None;
    let mut x = DVector::zeros(d);
    for _ in 0..total {
        for i in 0..d {
            x[i] = bounds.lower[i] + idx[i] as f64 * spacing[i];
        }
        let y = x.rows(0, n).into_owned();
        let u = x.rows(n, m).into_owned();
        if let (Ok(f), Ok((fy, fu))) = (sys.dynamics(&y, &u), sys.dynamics_jacobian(&y, &u)) {
            let lip = fy.norm() + fu.norm();
            if f.norm() <= lip * half_diag {
                let c = sys.cost(&y, &u);
                // strict comparison keeps the first point in lexicographic order on ties
                if best.as_ref().is_none_or(|(bc, _)| c < *bc) {
                    best = Some((c, x.clone()));
                }
            }
        }
        for i in (0..d).rev() {
            idx[i] += 1;
            if idx[i] < grid_pts {
                break;
            }
            idx[i] = 0;
        }
    }
    let (cost, x) = best.ok_or(Error::EmptyFeasibleSet)?;
    Ok(OracleResult {
        y: x.rows(0, n).into_owned(),
        u: x.rows(n, m).into_owned(),
        cost,
        spacing,
    })
}

/// Starting point that sits on the tracked reference of each built-in system.
pub fn default_guess(sys: &dyn ReducedSystem, y_ref: &DVector<f64>) -> StaticGuess {
    StaticGuess::new(y_ref.clone(), DVector::zeros(sys.control_dim()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::systems::*;
    use approx::assert_abs_diff_eq;

    fn dv(v: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(v)
    }

    #[test]
    fn kepler_static_point() {
        let sys = Kepler::new(1.0, 1.0, 4.5);
        let guess = StaticGuess::new(dv(&[4.5, 0.0, 0.1]), dv(&[0.0, 0.0]));
        let sol = solve_static(&sys, &guess).unwrap();
        assert_abs_diff_eq!(sol.y_bar[0], 4.5, epsilon = 1e-10);
        assert_abs_diff_eq!(sol.y_bar[1], 0.0, epsilon = 1e-10);
        assert_abs_diff_eq!(sol.y_bar[2], 4.5f64.powf(-1.5), epsilon = 1e-12);
        assert!(sol.u_bar.amax() < 1e-10);
        assert!(sol.p_bar.amax() < 1e-10);
        assert!(sol.residual_dyn < 1e-10 && sol.residual_kkt < 1e-10);
    }

    #[test]
    fn kepler_from_farther_guess() {
        let sys = Kepler::new(1.0, 1.0, 4.5);
        let guess = StaticGuess::new(dv(&[5.5, 0.2, 0.05]), dv(&[0.1, -0.1]));
        let sol = solve_static(&sys, &guess).unwrap();
        assert!((sol.y_bar - &sys.y_ref).amax() < 1e-9);
    }

    #[test]
    fn rigid_body_static_point() {
        let ocp = make_rigid_body(&RigidBodyParams::default()).unwrap();
        let guess = StaticGuess::new(dv(&[0.8, 0.1, -0.1]), dv(&[0.0; 3]));
        let sol = solve_static(ocp.system.as_ref(), &guess).unwrap();
        assert!((sol.y_bar - dv(&[1.0, 0.0, 0.0])).amax() < 1e-9);
        assert!(sol.u_bar.amax() < 1e-9);
        assert!(sol.p_bar.amax() < 1e-9);
    }

    #[test]
    fn rotors_static_point_is_degenerate() {
        let ocp = make_rotors(&RotorsParams::default()).unwrap();
        let guess = StaticGuess::new(dv(&[1.0, 0.0, 0.0, 0.0, 0.0, 0.0]), dv(&[0.0; 3]));
        let sol = solve_static(ocp.system.as_ref(), &guess).unwrap();
        assert_eq!(sol.y_bar, dv(&[1.0, 0.0, 0.0, 0.0, 0.0, 0.0]));
        assert!(sol.kkt_condition > 1e12);

        // the neutral rotor rate is picked up from the target, nothing else moves
        let target = dv(&[0.99, 0.01, 0.0, 46.0, 0.2, -0.3]);
        let anchored = anchor_static_family(ocp.system.as_ref(), &sol, &target).unwrap();
        assert_abs_diff_eq!(anchored.y_bar[3], 46.0, epsilon = 1e-8);
        for i in [0usize, 1, 2, 4, 5] {
            assert_abs_diff_eq!(anchored.y_bar[i], sol.y_bar[i], epsilon = 1e-8);
        }
        let f = ocp.system.dynamics(&anchored.y_bar, &anchored.u_bar).unwrap();
        assert!(f.amax() < 1e-10);
    }

    #[test]
    fn unique_solution_is_not_reanchored() {
        let sys = Kepler::new(1.0, 1.0, 4.5);
        let sol = solve_static(&sys, &StaticGuess::new(dv(&[4.5, 0.0, 0.1]), dv(&[0.0, 0.0]))).unwrap();
        let moved = anchor_static_family(&sys, &sol, &dv(&[5.0, 0.1, 0.2])).unwrap();
        assert_eq!(moved, sol);
    }

    #[test]
    fn pmp_stationarity_at_static_point() {
        let sys = Kepler::new(1.0, 1.0, 4.5);
        let sol = solve_static(&sys, &StaticGuess::new(dv(&[4.2, 0.1, 0.1]), dv(&[0.1, 0.0]))).unwrap();
        let (fy, fu) = sys.dynamics_jacobian(&sol.y_bar, &sol.u_bar).unwrap();
        let (gy, gu) = sys.cost_gradient(&sol.y_bar, &sol.u_bar);
        let hu = fu.transpose() * &sol.p_bar - gu;
        let hy = fy.transpose() * &sol.p_bar - gy;
        assert!(hu.amax() < 1e-9 && hy.amax() < 1e-9);
    }

    #[test]
    fn oracle_empty_box() {
        let sys = Kepler::new(1.0, 1.0, 4.5);
        let b = SearchBox {
            lower: dv(&[3.0, -0.01, 1.0, -0.01, -0.01]),
            upper: dv(&[3.1, 0.01, 1.1, 0.01, 0.01]),
        };
        assert!(matches!(
            static_bruteforce_oracle(&sys, &b, 11),
            Err(Error::EmptyFeasibleSet)
        ));
    }

    #[test]
    fn bad_guess_dimension() {
        let sys = Kepler::new(1.0, 1.0, 4.5);
        let g = StaticGuess::new(dv(&[4.5, 0.0]), dv(&[0.0, 0.0]));
        assert!(matches!(solve_static(&sys, &g), Err(Error::DimensionMismatch { .. })));
    }
}
