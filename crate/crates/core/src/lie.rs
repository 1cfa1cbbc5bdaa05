//! Primitives for the product groups SO(3)^a × (S¹)^b used by the built-in systems.
//!
//! Rotations are carried as unit quaternions and advanced by right
//! multiplication with the exact exponential of a body-frame velocity, so that
//! `R(t + dt) = R(t) exp(dt hat(ω))` realises `Ṙ = R hat(ω)`. Angles are kept
//! unwrapped on the real line.

use nalgebra::{DVector, Matrix3, Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Below this value of `‖ω‖·dt` the exponential switches to its Taylor series.
pub const SMALL_ANGLE: f64 = 1e-8;

/// Number of SO(3) and S¹ factors of a product group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupSignature {
    pub so3: usize,
    pub circles: usize,
}

impl GroupSignature {
    pub fn new(so3: usize, circles: usize) -> Self {
        Self { so3, circles }
    }

    /// Dimension of the Lie algebra (3 per rotation factor, 1 per circle).
    pub fn algebra_dim(&self) -> usize {
        3 * self.so3 + self.circles
    }
}

/// Element of the Lie algebra of a product group, in body coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct AlgebraVector {
    pub so3: Vec<Vector3<f64>>,
    pub rates: Vec<f64>,
}

impl AlgebraVector {
    pub fn zeros(sig: GroupSignature) -> Self {
        Self {
            so3: vec![Vector3::zeros(); sig.so3],
            rates: vec![0.0; sig.circles],
        }
    }

    pub fn signature(&self) -> GroupSignature {
        GroupSignature::new(self.so3.len(), self.rates.len())
    }

    /// Flat layout: rotation blocks first, then the circle rates.
    pub fn to_flat(&self) -> DVector<f64> {
        let sig = self.signature();
        let mut out = DVector::zeros(sig.algebra_dim());
        for (i, w) in self.so3.iter().enumerate() {
            out.fixed_rows_mut::<3>(3 * i).copy_from(w);
        }
        for (j, r) in self.rates.iter().enumerate() {
            out[3 * sig.so3 + j] = *r;
        }
        out
    }

    pub fn from_flat(sig: GroupSignature, flat: &DVector<f64>) -> Result<Self> {
        if flat.len() != sig.algebra_dim() {
            return Err(Error::DimensionMismatch {
                what: "algebra vector",
                expected: sig.algebra_dim(),
                got: flat.len(),
            });
        }
        Ok(Self {
            so3: (0..sig.so3).map(|i| flat.fixed_rows::<3>(3 * i).into_owned()).collect(),
            rates: flat.rows(3 * sig.so3, sig.circles).iter().copied().collect(),
        })
    }

    pub fn is_finite(&self) -> bool {
        self.so3.iter().all(|w| w.iter().all(|x| x.is_finite())) && self.rates.iter().all(|x| x.is_finite())
    }
}

/// Value of a product-group variable: rotation factors and unwrapped angles.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupElement {
    pub quaternions: Vec<UnitQuaternion<f64>>,
    pub angles: Vec<f64>,
}

impl GroupElement {
    pub fn identity(sig: GroupSignature) -> Self {
        Self {
            quaternions: vec![UnitQuaternion::identity(); sig.so3],
            angles: vec![0.0; sig.circles],
        }
    }

    pub fn signature(&self) -> GroupSignature {
        GroupSignature::new(self.quaternions.len(), self.angles.len())
    }

    fn check_signature(&self, sig: GroupSignature) -> Result<()> {
        if self.signature() != sig {
            return Err(Error::SignatureMismatch(format!(
                "group element has {:?}, expected {:?}",
                self.signature(),
                sig
            )));
        }
        Ok(())
    }
}

/// so(3) hat map: `hat(ω) v = ω × v`.
pub fn hat(omega: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(
        0.0, -omega.z, omega.y, //
        omega.z, 0.0, -omega.x, //
        -omega.y, omega.x, 0.0,
    )
}

/// Unit quaternion of the rotation `exp(dt hat(ω))`.
pub fn quat_exp(omega: &Vector3<f64>, dt: f64) -> UnitQuaternion<f64> {
    let norm = omega.norm();
    let angle = norm * dt;
    let q = if angle.abs() < SMALL_ANGLE {
        // cos(a/2) ≈ 1 - a²/8, sin(a/2)/|ω| ≈ dt/2 (1 - a²/24)
        let a2 = angle * angle;
        let v = omega * (0.5 * dt * (1.0 - a2 / 24.0));
        Quaternion::new(1.0 - a2 / 8.0, v.x, v.y, v.z)
    } else {
        let half = 0.5 * angle;
        let v = omega * (half.sin() / norm);
        Quaternion::new(half.cos(), v.x, v.y, v.z)
    };
    UnitQuaternion::new_normalize(q)
}

/// One step of `ġ = g ξ` with ξ held constant over `dt`.
pub fn group_step(g: &GroupElement, xi: &AlgebraVector, dt: f64) -> Result<GroupElement> {
    g.check_signature(xi.signature())?;
    let quaternions = g
        .quaternions
        .iter()
        .zip(&xi.so3)
        .map(|(q, w)| UnitQuaternion::new_normalize((q * quat_exp(w, dt)).into_inner()))
        .collect();
    let angles = g.angles.iter().zip(&xi.rates).map(|(th, r)| th + r * dt).collect();
    Ok(GroupElement { quaternions, angles })
}

/// Closed-form trim `g0 · exp(t ξ)`; `t` may be negative.
pub fn trim_flow(g0: &GroupElement, xi: &AlgebraVector, t: f64) -> Result<GroupElement> {
    group_step(g0, xi, t)
}

/// Sum over factors of `‖R₁ − R₂‖_F` and `|θ₁ − θ₂|`.
pub fn group_distance(a: &GroupElement, b: &GroupElement) -> Result<f64> {
    a.check_signature(b.signature())?;
    let rot: f64 = a
        .quaternions
        .iter()
        .zip(&b.quaternions)
        .map(|(p, q)| (p.to_rotation_matrix().into_inner() - q.to_rotation_matrix().into_inner()).norm())
        .sum();
    let ang: f64 = a.angles.iter().zip(&b.angles).map(|(x, y)| (x - y).abs()).sum();
    Ok(rot + ang)
}

/// `Rᵀ (1,1,1)ᵀ`, the curve used to visualise attitude histories.
pub fn body_diagonal(q: &UnitQuaternion<f64>) -> Vector3<f64> {
    q.to_rotation_matrix().into_inner().transpose() * Vector3::new(1.0, 1.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    /// Scaling-and-squaring matrix exponential with a degree-12 Taylor core.
    fn expm_oracle(a: &Matrix3<f64>, squarings: u32) -> Matrix3<f64> {
        let scaled = a / 2f64.powi(squarings as i32);
        let mut term = Matrix3::identity();
        let mut sum = Matrix3::identity();
        for k in 1..=12 {
            term = term * scaled / k as f64;
            sum += term;
        }
        for _ in 0..squarings {
            sum = sum * sum;
        }
        sum
    }

    #[test]
    fn hat_examples() {
        assert_eq!(hat(&Vector3::zeros()), Matrix3::zeros());
        let h = hat(&Vector3::new(0.0, 0.0, 1.0));
        assert_eq!(h, Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn quat_exp_examples() {
        let q = quat_exp(&Vector3::zeros(), 1.0);
        assert_eq!(q.coords, UnitQuaternion::<f64>::identity().coords);
        let q = quat_exp(&Vector3::new(0.0, 0.0, PI), 1.0);
        assert_abs_diff_eq!(q.w, 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(q.k, 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(q.i, 0.0);
        assert_abs_diff_eq!(q.j, 0.0);
    }

    #[test]
    fn quat_exp_matches_matrix_exponential() {
        let w = Vector3::new(0.3, -0.2, 0.1);
        let dt = 0.05;
        let r = quat_exp(&w, dt).to_rotation_matrix().into_inner();
        let oracle = expm_oracle(&(hat(&w) * dt), 12);
        assert!((r - oracle).norm() < 1e-10);
    }

    #[test]
    fn small_angle_branch_is_continuous() {
        let w = Vector3::new(1.0, 2.0, -0.5);
        let dt = 0.9e-8 / w.norm();
        let q = quat_exp(&w, dt);
        let r = q.to_rotation_matrix().into_inner();
        let oracle = expm_oracle(&(hat(&w) * dt), 0);
        assert!((r - oracle).norm() < 1e-15);
    }

    #[test]
    fn group_step_examples() {
        let sig = GroupSignature::new(1, 1);
        let g = GroupElement::identity(sig);
        assert_eq!(group_step(&g, &AlgebraVector::zeros(sig), 0.3).unwrap(), g);

        let xi = AlgebraVector {
            so3: vec![Vector3::zeros()],
            rates: vec![0.5],
        };
        let g1 = group_step(&g, &xi, 2.0).unwrap();
        assert_eq!(g1.angles[0], 1.0);

        let w = Vector3::new(0.4, -1.1, 0.7);
        let xi = AlgebraVector {
            so3: vec![w],
            rates: vec![0.0],
        };
        let mut gk = g.clone();
        for _ in 0..100 {
            gk = group_step(&gk, &xi, 0.01).unwrap();
        }
        let once = group_step(&g, &xi, 1.0).unwrap();
        let d = gk.quaternions[0].coords - once.quaternions[0].coords;
        assert!(d.norm() < 1e-9);
    }

    #[test]
    fn group_step_rejects_mismatch() {
        let g = GroupElement::identity(GroupSignature::new(1, 0));
        let xi = AlgebraVector::zeros(GroupSignature::new(0, 1));
        assert!(matches!(group_step(&g, &xi, 1.0), Err(Error::SignatureMismatch(_))));
    }

    #[test]
    fn trim_flow_examples() {
        let sig = GroupSignature::new(1, 1);
        let mut g0 = GroupElement::identity(sig);
        g0.angles[0] = 0.25;
        let xi = AlgebraVector {
            so3: vec![Vector3::new(1.0, 0.0, 0.0)],
            rates: vec![4.5f64.powf(-1.5)],
        };
        assert_eq!(trim_flow(&g0, &xi, 0.0).unwrap(), g0);
        let g = trim_flow(&g0, &xi, 10.0).unwrap();
        assert_abs_diff_eq!(
            g.angles[0],
            0.25 + 10.0 * (1.0 / 4.5f64.powi(3)).sqrt(),
            epsilon = 1e-15
        );
        let g = trim_flow(&g0, &xi, PI / 2.0).unwrap();
        let e3 = g.quaternions[0] * Vector3::new(0.0, 1.0, 0.0);
        assert!((e3 - Vector3::new(0.0, 0.0, 1.0)).norm() < 1e-10);
    }

    #[test]
    fn distance_examples() {
        let sig = GroupSignature::new(1, 1);
        let a = GroupElement::identity(sig);
        assert_eq!(group_distance(&a, &a).unwrap(), 0.0);

        let mut x = GroupElement::identity(GroupSignature::new(0, 1));
        let mut y = x.clone();
        x.angles[0] = 1.0;
        y.angles[0] = 3.5;
        assert_eq!(group_distance(&x, &y).unwrap(), 2.5);

        let r = GroupElement::identity(GroupSignature::new(1, 0));
        let mut rz = r.clone();
        rz.quaternions[0] = quat_exp(&Vector3::new(0.0, 0.0, PI), 1.0);
        assert_abs_diff_eq!(group_distance(&r, &rz).unwrap(), 8f64.sqrt(), epsilon = 1e-14);
    }

    fn vec3() -> impl Strategy<Value = Vector3<f64>> {
        (-3.0..3.0f64, -3.0..3.0f64, -3.0..3.0f64).prop_map(|(a, b, c)| Vector3::new(a, b, c))
    }

    proptest! {
        #[test]
        fn hat_is_cross_and_skew(w in vec3(), v in vec3()) {
            let h = hat(&w);
            prop_assert!((h * v - w.cross(&v)).norm() < 1e-14);
            prop_assert_eq!(h.transpose(), -h);
        }

        #[test]
        fn steps_keep_unit_norm(ws in proptest::collection::vec(vec3(), 1..200), dt in 0.001..0.5f64) {
            let sig = GroupSignature::new(1, 0);
            let mut g = GroupElement::identity(sig);
            for w in &ws {
                let xi = AlgebraVector { so3: vec![*w], rates: vec![] };
                g = group_step(&g, &xi, dt).unwrap();
                prop_assert!((g.quaternions[0].coords.norm() - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn distance_symmetric_nonnegative(w1 in vec3(), w2 in vec3(), a in -10.0..10.0f64, b in -10.0..10.0f64) {
            let p = GroupElement { quaternions: vec![quat_exp(&w1, 1.0)], angles: vec![a] };
            let q = GroupElement { quaternions: vec![quat_exp(&w2, 1.0)], angles: vec![b] };
            let d1 = group_distance(&p, &q).unwrap();
            let d2 = group_distance(&q, &p).unwrap();
            prop_assert!(d1 >= 0.0);
            prop_assert!((d1 - d2).abs() < 1e-14);
        }

        #[test]
        fn repeated_steps_match_trim(w in vec3(), n in 1usize..300) {
            let sig = GroupSignature::new(1, 1);
            let g0 = GroupElement::identity(sig);
            let xi = AlgebraVector { so3: vec![w], rates: vec![0.3] };
            let dt = 2.0 / n as f64;
            let mut g = g0.clone();
            for _ in 0..n {
                g = group_step(&g, &xi, dt).unwrap();
            }
            let tr = trim_flow(&g0, &xi, 2.0).unwrap();
            prop_assert!(group_distance(&g, &tr).unwrap() < 1e-9);
        }
    }
}
