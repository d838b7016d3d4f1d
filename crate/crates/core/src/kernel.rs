//! Closed-form Landau collision coefficients for hard potentials.
//!
//! The diffusion matrix is `a(x) = |x|^(2+gamma) P(x)` with `P(x)` the
//! orthogonal projector onto the plane perpendicular to `x`, the drift is
//! its divergence `b(x) = -2 |x|^gamma x`, and `sigma(x) = a(x)^(1/2) =
//! |x|^(1+gamma/2) P(x)`. All of them vanish continuously at `x = 0` and
//! are returned as exact zeros there.

use crate::linalg::{Mat3, Vec3};
use thiserror::Error;

/// Interaction exponent restricted to hard potentials.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Gamma(f64);

impl Gamma {
    pub fn new(gamma: f64) -> Result<Self, KernelError> {
        if gamma.is_finite() && gamma > 0.0 && gamma <= 1.0 {
            Ok(Gamma(gamma))
        } else {
            Err(KernelError::GammaOutOfRange(gamma))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for Gamma {
    type Error = KernelError;
    fn try_from(v: f64) -> Result<Self, Self::Error> {
        Gamma::new(v)
    }
}

impl From<Gamma> for f64 {
    fn from(g: Gamma) -> f64 {
        g.0
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum KernelError {
    #[error("gamma = {0} outside the hard-potential range (0, 1]")]
    GammaOutOfRange(f64),
    #[error("projector undefined at x = 0")]
    ZeroVector,
}

/// `|x|^e` with an exact zero branch, avoiding `0^0` and subnormal surprises.
#[inline]
pub fn pow_norm(norm: f64, e: f64) -> f64 {
    if norm == 0.0 {
        0.0
    } else if e == 1.0 {
        norm
    } else {
        norm.powf(e)
    }
}

/// Orthogonal projector onto the plane perpendicular to `x`.
///
/// Rejects `x = 0`, where the projector is genuinely undefined; the
/// coefficient functions below handle that point themselves.
pub fn proj_perp(x: Vec3) -> Result<Mat3, KernelError> {
    let n2 = x.norm_squared();
    if n2 == 0.0 {
        return Err(KernelError::ZeroVector);
    }
    let inv = 1.0 / n2;
    let mut m = [[0.0; 3]; 3];
    let xa = x.as_array();
    for k in 0..3 {
        for l in 0..3 {
            let delta = if k == l { 1.0 } else { 0.0 };
            m[k][l] = delta - xa[k] * xa[l] * inv;
        }
    }
    Ok(Mat3::new(m))
}

/// Diffusion matrix `a(x) = |x|^(2+gamma) P(x)`; zero matrix at `x = 0`.
pub fn a_matrix(x: Vec3, gamma: Gamma) -> Mat3 {
    let r = x.norm();
    if r == 0.0 {
        return Mat3::ZERO;
    }
    let w = pow_norm(r, 2.0 + gamma.get());
    proj_perp(x).expect("nonzero x").scale(w)
}

/// Drift `b(x) = div a(x) = -2 |x|^gamma x`; zero at `x = 0`.
pub fn b_vector(x: Vec3, gamma: Gamma) -> Vec3 {
    let r = x.norm();
    if r == 0.0 {
        return Vec3::ZERO;
    }
    x.scale(-2.0 * pow_norm(r, gamma.get()))
}

/// `sigma(x) = a(x)^(1/2) = |x|^(1+gamma/2) P(x)`; zero matrix at `x = 0`.
pub fn sigma_matrix(x: Vec3, gamma: Gamma) -> Mat3 {
    let r = x.norm();
    if r == 0.0 {
        return Mat3::ZERO;
    }
    let w = pow_norm(r, 1.0 + 0.5 * gamma.get());
    proj_perp(x).expect("nonzero x").scale(w)
}

/// Frobenius inner product of `sigma(x)` and `sigma(xt)` in closed form:
/// `|x|^(1+g/2) |xt|^(1+g/2) (1 + (x.xt)^2 / (|x|^2 |xt|^2))`.
pub fn sigma_inner(x: Vec3, xt: Vec3, gamma: Gamma) -> f64 {
    let r = x.norm();
    let rt = xt.norm();
    if r == 0.0 || rt == 0.0 {
        return 0.0;
    }
    let e = 1.0 + 0.5 * gamma.get();
    let cos = x.dot(xt) / (r * rt);
    pow_norm(r, e) * pow_norm(rt, e) * (1.0 + cos * cos)
}

/// `||sigma(x) - sigma(xt)||^2` evaluated through the closed-form inner
/// products, so the difference of nearly equal matrices never cancels.
pub fn sigma_diff_norm_squared(x: Vec3, xt: Vec3, gamma: Gamma) -> f64 {
    if x == xt {
        return 0.0;
    }
    let g = gamma.get();
    let s2 = 2.0 * pow_norm(x.norm(), g + 2.0);
    let st2 = 2.0 * pow_norm(xt.norm(), g + 2.0);
    (s2 + st2 - 2.0 * sigma_inner(x, xt, gamma)).max(0.0)
}

/// Apply `sigma(x)` to a vector without forming the matrix:
/// `sigma(x) v = |x|^(1+g/2) (v - (x.v / |x|^2) x)`.
pub fn sigma_apply(x: Vec3, v: Vec3, gamma: Gamma) -> Vec3 {
    let r2 = x.norm_squared();
    if r2 == 0.0 {
        return Vec3::ZERO;
    }
    let w = pow_norm(r2.sqrt(), 1.0 + 0.5 * gamma.get());
    let proj = v - x.scale(x.dot(v) / r2);
    proj.scale(w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::psd_sqrt;
    use crate::rng::CounterRng;
    use approx::assert_relative_eq;

    fn g(v: f64) -> Gamma {
        Gamma::new(v).unwrap()
    }

    #[test]
    fn proj_perp_axis_aligned() {
        let p = proj_perp(Vec3::new(1.0, 0.0, 0.0)).unwrap();
        assert_eq!(p, Mat3::diag(0.0, 1.0, 1.0));
        let p = proj_perp(Vec3::new(0.0, 0.0, 2.0)).unwrap();
        assert_eq!(p, Mat3::diag(1.0, 1.0, 0.0));
    }

    #[test]
    fn proj_perp_diagonal_direction() {
        let p = proj_perp(Vec3::new(1.0, 1.0, 0.0)).unwrap();
        let expect = Mat3::new([[0.5, -0.5, 0.0], [-0.5, 0.5, 0.0], [0.0, 0.0, 1.0]]);
        assert!((p - expect).norm() < 1e-15);
    }

    #[test]
    fn proj_perp_rejects_zero() {
        assert_eq!(proj_perp(Vec3::ZERO), Err(KernelError::ZeroVector));
    }

    #[test]
    fn proj_perp_properties_random() {
        let mut rng = CounterRng::new(&[101]);
        for _ in 0..1000 {
            let x = rng.normal_vec3();
            if x.norm() < 1e-12 {
                continue;
            }
            let p = proj_perp(x).unwrap();
            assert!((p.matmul(p) - p).norm() < 1e-12, "idempotent");
            assert_eq!(p.asymmetry(), 0.0, "symmetric by construction");
            assert!(p.matvec(x).norm() < 1e-12 * x.norm(), "annihilates x");
            assert_relative_eq!(p.trace(), 2.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn a_matrix_examples() {
        assert!((a_matrix(Vec3::new(1.0, 0.0, 0.0), g(1.0)) - Mat3::diag(0.0, 1.0, 1.0)).norm() < 1e-15);
        assert!((a_matrix(Vec3::new(2.0, 0.0, 0.0), g(1.0)) - Mat3::diag(0.0, 8.0, 8.0)).norm() < 1e-14);
        assert_eq!(a_matrix(Vec3::ZERO, g(0.3)), Mat3::ZERO);
    }

    #[test]
    fn b_vector_examples() {
        assert_eq!(b_vector(Vec3::new(1.0, 0.0, 0.0), g(1.0)), Vec3::new(-2.0, 0.0, 0.0));
        let b = b_vector(Vec3::new(0.0, 3.0, 0.0), g(0.5));
        assert_relative_eq!(b.y, -2.0 * 3.0_f64.sqrt() * 3.0, epsilon = 1e-12);
        assert_eq!(b.x, 0.0);
        assert_eq!(b.z, 0.0);
        assert_eq!(b_vector(Vec3::ZERO, g(0.5)), Vec3::ZERO);
    }

    #[test]
    fn sigma_matrix_examples() {
        assert!((sigma_matrix(Vec3::new(1.0, 0.0, 0.0), g(1.0)) - Mat3::diag(0.0, 1.0, 1.0)).norm() < 1e-15);
        let s = sigma_matrix(Vec3::new(2.0, 0.0, 0.0), g(1.0));
        assert_relative_eq!(s.frob_dot(s), 16.0, epsilon = 1e-12);
        assert_eq!(sigma_matrix(Vec3::ZERO, g(1.0)), Mat3::ZERO);
    }

    #[test]
    fn sigma_squares_to_a() {
        let mut rng = CounterRng::new(&[102]);
        for _ in 0..1000 {
            let x = rng.normal_vec3().scale(rng.uniform_in(0.0, 5.0));
            let gamma = g(rng.uniform_in(0.05, 1.0));
            let s = sigma_matrix(x, gamma);
            let a = a_matrix(x, gamma);
            let err = (s.matmul(s) - a).norm();
            assert!(err <= 1e-10 * (1.0 + a.norm()), "err {err:e}");
        }
    }

    #[test]
    fn sigma_inner_examples() {
        let e1 = Vec3::new(1.0, 0.0, 0.0);
        let e2 = Vec3::new(0.0, 1.0, 0.0);
        assert_relative_eq!(sigma_inner(e1, e1, g(1.0)), 2.0, epsilon = 1e-14);
        assert_relative_eq!(sigma_inner(e1, e2, g(1.0)), 1.0, epsilon = 1e-14);
        // Direct Frobenius product of the two explicit matrices.
        let x = Vec3::new(2.0, 0.0, 0.0);
        let direct = sigma_matrix(x, g(1.0)).frob_dot(sigma_matrix(e1, g(1.0)));
        assert_relative_eq!(sigma_inner(x, e1, g(1.0)), direct, epsilon = 1e-12);
        assert_relative_eq!(direct, 2.0_f64.powf(1.5) * 2.0, epsilon = 1e-12);
        assert_eq!(sigma_inner(Vec3::ZERO, e1, g(1.0)), 0.0);
    }

    #[test]
    fn sigma_inner_matches_matrices_and_lower_bound() {
        let mut rng = CounterRng::new(&[103]);
        for _ in 0..1000 {
            let x = rng.normal_vec3();
            let xt = rng.normal_vec3();
            let gamma = g(rng.uniform_in(0.05, 1.0));
            let inner = sigma_inner(x, xt, gamma);
            let direct = sigma_matrix(x, gamma).frob_dot(sigma_matrix(xt, gamma));
            assert_relative_eq!(inner, direct, max_relative = 1e-12);
            let lb = 2.0
                * pow_norm(x.norm(), 0.5 * gamma.get())
                * pow_norm(xt.norm(), 0.5 * gamma.get())
                * x.dot(xt);
            assert!(inner >= lb - 1e-12 * (1.0 + inner.abs() + lb.abs()));
        }
    }

    #[test]
    fn psd_sqrt_matches_closed_form_sigma() {
        let x = Vec3::new(1.0, 1.0, 0.0);
        let s = psd_sqrt(&a_matrix(x, g(1.0))).unwrap();
        let expect = sigma_matrix(x, g(1.0));
        assert!((s - expect).norm() < 1e-10 * (1.0 + expect.norm()));
    }

    #[test]
    fn sigma_apply_matches_matrix() {
        let mut rng = CounterRng::new(&[104]);
        for _ in 0..500 {
            let x = rng.normal_vec3();
            let v = rng.normal_vec3();
            let gamma = g(rng.uniform_in(0.05, 1.0));
            let via_mat = sigma_matrix(x, gamma).matvec(v);
            let direct = sigma_apply(x, v, gamma);
            assert!((via_mat - direct).norm() <= 1e-12 * (1.0 + via_mat.norm()));
        }
    }

    #[test]
    fn gamma_range_enforced() {
        assert!(Gamma::new(0.0).is_err());
        assert!(Gamma::new(1.5).is_err());
        assert!(Gamma::new(-0.2).is_err());
        assert!(Gamma::new(f64::NAN).is_err());
        assert!(Gamma::new(1.0).is_ok());
    }
}
