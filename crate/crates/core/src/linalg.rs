//! 3D vectors, 3x3 matrices and the symmetric PSD square root.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// A velocity or relative-velocity vector in 3D phase space.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3 { x: 0.0, y: 0.0, z: 0.0 };

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Vec3 { x, y, z }
    }

    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn norm_squared(self) -> f64 {
        self.dot(self)
    }

    pub fn norm(self) -> f64 {
        self.norm_squared().sqrt()
    }

    pub fn scale(self, s: f64) -> Vec3 {
        Vec3::new(s * self.x, s * self.y, s * self.z)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn as_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }
}

impl std::ops::Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl std::ops::Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl std::ops::Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

impl std::ops::AddAssign for Vec3 {
    fn add_assign(&mut self, o: Vec3) {
        self.x += o.x;
        self.y += o.y;
        self.z += o.z;
    }
}

/// A real 3x3 matrix with row-major entries.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Mat3 {
    pub m: [[f64; 3]; 3],
}

impl Mat3 {
    pub const ZERO: Mat3 = Mat3 { m: [[0.0; 3]; 3] };

    pub const IDENTITY: Mat3 = Mat3 {
        m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
    };

    pub const fn new(m: [[f64; 3]; 3]) -> Self {
        Mat3 { m }
    }

    pub fn diag(a: f64, b: f64, c: f64) -> Self {
        Mat3::new([[a, 0.0, 0.0], [0.0, b, 0.0], [0.0, 0.0, c]])
    }

    /// `a b^T`.
    pub fn outer(a: Vec3, b: Vec3) -> Self {
        let a = a.as_array();
        let b = b.as_array();
        let mut m = [[0.0; 3]; 3];
        for k in 0..3 {
            for l in 0..3 {
                m[k][l] = a[k] * b[l];
            }
        }
        Mat3::new(m)
    }

    pub fn trace(self) -> f64 {
        self.m[0][0] + self.m[1][1] + self.m[2][2]
    }

    pub fn transpose(self) -> Mat3 {
        let mut t = [[0.0; 3]; 3];
        for k in 0..3 {
            for l in 0..3 {
                t[k][l] = self.m[l][k];
            }
        }
        Mat3::new(t)
    }

    pub fn scale(self, s: f64) -> Mat3 {
        let mut m = self.m;
        for row in &mut m {
            for e in row {
                *e *= s;
            }
        }
        Mat3::new(m)
    }

    pub fn matvec(self, v: Vec3) -> Vec3 {
        let v = v.as_array();
        let r = |k: usize| self.m[k][0] * v[0] + self.m[k][1] * v[1] + self.m[k][2] * v[2];
        Vec3::new(r(0), r(1), r(2))
    }

    pub fn matmul(self, o: Mat3) -> Mat3 {
        let mut m = [[0.0; 3]; 3];
        for k in 0..3 {
            for l in 0..3 {
                m[k][l] = self.m[k][0] * o.m[0][l] + self.m[k][1] * o.m[1][l] + self.m[k][2] * o.m[2][l];
            }
        }
        Mat3::new(m)
    }

    /// Frobenius inner product `sum_kl A_kl B_kl`.
    pub fn frob_dot(self, o: Mat3) -> f64 {
        let mut s = 0.0;
        for k in 0..3 {
            for l in 0..3 {
                s += self.m[k][l] * o.m[k][l];
            }
        }
        s
    }

    /// Frobenius norm.
    pub fn norm(self) -> f64 {
        self.frob_dot(self).sqrt()
    }

    pub fn is_finite(self) -> bool {
        self.m.iter().flatten().all(|e| e.is_finite())
    }

    /// Largest absolute asymmetry `|A_kl - A_lk|`.
    pub fn asymmetry(self) -> f64 {
        let mut worst: f64 = 0.0;
        for k in 0..3 {
            for l in (k + 1)..3 {
                worst = worst.max((self.m[k][l] - self.m[l][k]).abs());
            }
        }
        worst
    }
}

impl std::ops::Add for Mat3 {
    type Output = Mat3;
    fn add(self, o: Mat3) -> Mat3 {
        let mut m = self.m;
        for k in 0..3 {
            for l in 0..3 {
                m[k][l] += o.m[k][l];
            }
        }
        Mat3::new(m)
    }
}

impl std::ops::Sub for Mat3 {
    type Output = Mat3;
    fn sub(self, o: Mat3) -> Mat3 {
        let mut m = self.m;
        for k in 0..3 {
            for l in 0..3 {
                m[k][l] -= o.m[k][l];
            }
        }
        Mat3::new(m)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum LinalgError {
    #[error("matrix is not symmetric: asymmetry {asymmetry:e} exceeds tolerance {tolerance:e}")]
    NotSymmetric { asymmetry: f64, tolerance: f64 },
    #[error("matrix is not positive semidefinite: eigenvalue {eigenvalue:e} below -{tolerance:e}")]
    Indefinite { eigenvalue: f64, tolerance: f64 },
    #[error("matrix has non-finite entries")]
    NonFinite,
}

/// Eigendecomposition of a symmetric 3x3 matrix by cyclic Jacobi rotations.
///
/// Returns `(eigenvalues, eigenvectors)` with `A = V diag(w) V^T`; columns of
/// `V` are the eigenvectors. Only the symmetric part of the input is read.
pub fn sym_eigen(a: &Mat3) -> ([f64; 3], Mat3) {
    // Work on the symmetrized copy so tiny asymmetries do not break convergence.
    let mut s = [[0.0; 3]; 3];
    for k in 0..3 {
        for l in 0..3 {
            s[k][l] = 0.5 * (a.m[k][l] + a.m[l][k]);
        }
    }
    let mut v = Mat3::IDENTITY.m;
    let scale = a.norm().max(f64::MIN_POSITIVE);
    for _sweep in 0..30 {
        let off = (s[0][1] * s[0][1] + s[0][2] * s[0][2] + s[1][2] * s[1][2]).sqrt();
        if off <= 1e-15 * scale {
            break;
        }
        for (p, q) in [(0usize, 1usize), (0, 2), (1, 2)] {
            let apq = s[p][q];
            if apq == 0.0 {
                continue;
            }
            let theta = (s[q][q] - s[p][p]) / (2.0 * apq);
            let t = if theta >= 0.0 {
                1.0 / (theta + (1.0 + theta * theta).sqrt())
            } else {
                -1.0 / (-theta + (1.0 + theta * theta).sqrt())
            };
            let c = 1.0 / (1.0 + t * t).sqrt();
            let sn = t * c;
            // Rotate rows/columns p and q.
            for k in 0..3 {
                let skp = s[k][p];
                let skq = s[k][q];
                s[k][p] = c * skp - sn * skq;
                s[k][q] = sn * skp + c * skq;
            }
            for l in 0..3 {
                let spl = s[p][l];
                let sql = s[q][l];
                s[p][l] = c * spl - sn * sql;
                s[q][l] = sn * spl + c * sql;
            }
            for k in 0..3 {
                let vkp = v[k][p];
                let vkq = v[k][q];
                v[k][p] = c * vkp - sn * vkq;
                v[k][q] = sn * vkp + c * vkq;
            }
        }
    }
    ([s[0][0], s[1][1], s[2][2]], Mat3::new(v))
}

/// Symmetric PSD square root via spectral decomposition.
///
/// Symmetry and eigenvalue nonnegativity are checked at a relative tolerance
/// of `1e-10` (scaled by `1 + ||A||_F`, since mean-field diffusion matrices
/// carry rounding noise proportional to their size); eigenvalues in the
/// tolerance band below zero are clamped to zero.
pub fn psd_sqrt(a: &Mat3) -> Result<Mat3, LinalgError> {
    if !a.is_finite() {
        return Err(LinalgError::NonFinite);
    }
    let tol = 1e-10 * (1.0 + a.norm());
    let asym = a.asymmetry();
    if asym > tol {
        return Err(LinalgError::NotSymmetric { asymmetry: asym, tolerance: tol });
    }
    let (w, v) = sym_eigen(a);
    let mut sq = [0.0; 3];
    for (k, &wk) in w.iter().enumerate() {
        if wk < -tol {
            return Err(LinalgError::Indefinite { eigenvalue: wk, tolerance: tol });
        }
        sq[k] = wk.max(0.0).sqrt();
    }
    // V diag(sqrt(w)) V^T, assembled symmetrically.
    let mut m = [[0.0; 3]; 3];
    for k in 0..3 {
        for l in k..3 {
            let mut e = 0.0;
            for j in 0..3 {
                e += v.m[k][j] * sq[j] * v.m[l][j];
            }
            m[k][l] = e;
            m[l][k] = e;
        }
    }
    Ok(Mat3::new(m))
}

/// Deterministic pairwise (tree) summation; the result does not depend on
/// how callers partitioned the work.
pub fn tree_sum(values: &[f64]) -> f64 {
    match values.len() {
        0 => 0.0,
        1 => values[0],
        2 => values[0] + values[1],
        n => {
            let half = n / 2;
            tree_sum(&values[..half]) + tree_sum(&values[half..])
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn eigen_recovers_diagonal() {
        let a = Mat3::diag(0.0, 4.0, 9.0);
        let (w, v) = sym_eigen(&a);
        let mut sorted = w;
        sorted.sort_by(f64::total_cmp);
        assert_relative_eq!(sorted[0], 0.0, epsilon = 1e-14);
        assert_relative_eq!(sorted[1], 4.0, epsilon = 1e-14);
        assert_relative_eq!(sorted[2], 9.0, epsilon = 1e-14);
        // V diag(w) V^T reproduces A.
        let rec = v.matmul(Mat3::diag(w[0], w[1], w[2])).matmul(v.transpose());
        assert!((rec - a).norm() < 1e-13);
    }

    #[test]
    fn psd_sqrt_diag() {
        let s = psd_sqrt(&Mat3::diag(0.0, 4.0, 9.0)).unwrap();
        assert!((s - Mat3::diag(0.0, 2.0, 3.0)).norm() < 1e-12);
    }

    #[test]
    fn psd_sqrt_identity() {
        let s = psd_sqrt(&Mat3::IDENTITY).unwrap();
        assert!((s - Mat3::IDENTITY).norm() < 1e-14);
    }

    #[test]
    fn psd_sqrt_squares_back() {
        // A dense symmetric PSD matrix: B B^T for a fixed B.
        let b = Mat3::new([[1.0, 2.0, -1.0], [0.5, 1.5, 3.0], [-2.0, 0.25, 1.0]]);
        let a = b.matmul(b.transpose());
        let s = psd_sqrt(&a).unwrap();
        let err = (s.matmul(s) - a).norm() / a.norm();
        assert!(err < 1e-12, "relative error {err:e}");
        assert!(s.asymmetry() == 0.0);
    }

    #[test]
    fn psd_sqrt_rejects_asymmetric() {
        let a = Mat3::new([[1.0, 0.5, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
        assert!(matches!(psd_sqrt(&a), Err(LinalgError::NotSymmetric { .. })));
    }

    #[test]
    fn psd_sqrt_rejects_indefinite() {
        let a = Mat3::diag(1.0, -0.5, 2.0);
        assert!(matches!(psd_sqrt(&a), Err(LinalgError::Indefinite { .. })));
    }

    #[test]
    fn psd_sqrt_clamps_rounding_noise() {
        let a = Mat3::diag(1.0, -1e-12, 2.0);
        let s = psd_sqrt(&a).unwrap();
        assert_eq!(s.m[1][1], 0.0);
    }

    #[test]
    fn tree_sum_matches_naive_on_ones() {
        let xs = vec![1.0; 1023];
        assert_eq!(tree_sum(&xs), 1023.0);
    }
}
