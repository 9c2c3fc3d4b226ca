//! Small dense matrix kernels for the `n × n` gain matrices (n is the state
//! dimension, single digits). Unrolled library machinery is not worth the
//! dependency at these sizes; everything here is a few dozen lines and exact
//! about its failure modes.

use alloc::vec;
use alloc::vec::Vec;

use crate::fmath;

/// Dense square matrix, row major. Used for both symmetric gain matrices and
/// the (non-symmetric) factor matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct Mat {
    n: usize,
    a: Vec<f64>,
}

impl Mat {
    pub fn zeros(n: usize) -> Self {
        Mat { n, a: vec![0.0; n * n] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Mat::zeros(n);
        for i in 0..n {
            for j in 0..n {
                m[(i, j)] = f(i, j);
            }
        }
        m
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.n);
        let mut y = vec![0.0; self.n];
        for i in 0..self.n {
            let mut s = 0.0;
            for j in 0..self.n {
                s += self[(i, j)] * x[j];
            }
            y[i] = s;
        }
        y
    }

    /// `x' A y`.
    pub fn bilinear(&self, x: &[f64], y: &[f64]) -> f64 {
        let ay = self.matvec(y);
        let mut s = 0.0;
        for i in 0..self.n {
            s += x[i] * ay[i];
        }
        s
    }

    /// Quadratic form `x' A x`.
    pub fn quad_form(&self, x: &[f64]) -> f64 {
        self.bilinear(x, x)
    }

    pub fn sub_identity_scaled(&self, c: f64) -> Mat {
        let mut m = self.clone();
        for i in 0..self.n {
            m[(i, i)] -= c;
        }
        m
    }

    pub fn is_finite(&self) -> bool {
        self.a.iter().all(|v| v.is_finite())
    }
}

impl core::ops::Index<(usize, usize)> for Mat {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.a[i * self.n + j]
    }
}

impl core::ops::IndexMut<(usize, usize)> for Mat {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.a[i * self.n + j]
    }
}

/// Lower-triangular Cholesky factor of a symmetric positive definite matrix.
#[derive(Clone, Debug)]
pub struct Cholesky {
    n: usize,
    l: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NotPositiveDefinite {
    /// 1-based index of the failing pivot.
    pub pivot: usize,
}

impl core::fmt::Display for NotPositiveDefinite {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(f, "matrix is not positive definite (pivot {})", self.pivot)
    }
}

#[cfg(feature = "std")]
impl std::error::Error for NotPositiveDefinite {}

impl Cholesky {
    /// Factor `m` (assumed symmetric; only the lower triangle is read).
    pub fn new(m: &Mat) -> Result<Self, NotPositiveDefinite> {
        let n = m.dim();
        let mut l = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                let mut s = m[(i, j)];
                for k in 0..j {
                    s -= l[i * n + k] * l[j * n + k];
                }
                if i == j {
                    if !(s > 0.0) || !s.is_finite() {
                        return Err(NotPositiveDefinite { pivot: i + 1 });
                    }
                    l[i * n + i] = fmath::sqrt(s);
                } else {
                    l[i * n + j] = s / l[j * n + j];
                }
            }
        }
        Ok(Cholesky { n, l })
    }

    /// Solve `A x = b` via the stored factor.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        debug_assert_eq!(b.len(), n);
        let mut y = vec![0.0; n];
        for i in 0..n {
            let mut s = b[i];
            for k in 0..i {
                s -= self.l[i * n + k] * y[k];
            }
            y[i] = s / self.l[i * n + i];
        }
        let mut x = vec![0.0; n];
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in i + 1..n {
                s -= self.l[k * n + i] * x[k];
            }
            x[i] = s / self.l[i * n + i];
        }
        x
    }

    /// `|L' x|²`, i.e. the quadratic form `x' A x` written through the factor.
    pub fn quad_form_via_factor(&self, x: &[f64]) -> f64 {
        let n = self.n;
        let mut total = 0.0;
        for i in 0..n {
            // (L' x)_i = sum_{k >= i} L[k][i] x[k]
            let mut s = 0.0;
            for k in i..n {
                s += self.l[k * n + i] * x[k];
            }
            total += s * s;
        }
        total
    }

    pub fn det(&self) -> f64 {
        let mut d = 1.0;
        for i in 0..self.n {
            let v = self.l[i * self.n + i];
            d *= v * v;
        }
        d
    }
}

/// Determinant by LU with partial pivoting (handles indefinite matrices, as
/// corrupted check fixtures can be).
pub fn det_lu(m: &Mat) -> f64 {
    let n = m.dim();
    let mut a = m.clone();
    let mut det = 1.0;
    for col in 0..n {
        let mut pivot = col;
        let mut best = fmath::abs(a[(col, col)]);
        for r in col + 1..n {
            let v = fmath::abs(a[(r, col)]);
            if v > best {
                best = v;
                pivot = r;
            }
        }
        if best == 0.0 {
            return 0.0;
        }
        if pivot != col {
            for j in 0..n {
                let tmp = a[(col, j)];
                a[(col, j)] = a[(pivot, j)];
                a[(pivot, j)] = tmp;
            }
            det = -det;
        }
        det *= a[(col, col)];
        for r in col + 1..n {
            let f = a[(r, col)] / a[(col, col)];
            for j in col..n {
                a[(r, j)] -= f * a[(col, j)];
            }
        }
    }
    det
}

/// All eigenvalues of a symmetric matrix by cyclic Jacobi rotations.
pub fn sym_eigenvalues(m: &Mat) -> Vec<f64> {
    let n = m.dim();
    let mut a = m.clone();
    for _sweep in 0..64 {
        let mut off = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                off += a[(i, j)] * a[(i, j)];
            }
        }
        let scale = {
            let mut s = 0.0;
            for i in 0..n {
                for j in 0..n {
                    s += a[(i, j)] * a[(i, j)];
                }
            }
            s
        };
        if off <= 1e-30 * (scale + 1e-300) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let tau = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = if tau >= 0.0 {
                    1.0 / (tau + fmath::sqrt(1.0 + tau * tau))
                } else {
                    -1.0 / (-tau + fmath::sqrt(1.0 + tau * tau))
                };
                let c = 1.0 / fmath::sqrt(1.0 + t * t);
                let s = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| a[(i, i)]).collect()
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn sym_min_eigenvalue(m: &Mat) -> f64 {
    sym_eigenvalues(m).into_iter().fold(f64::INFINITY, f64::min)
}

/// Spectral norm of a symmetric matrix (largest eigenvalue magnitude).
pub fn sym_spectral_norm(m: &Mat) -> f64 {
    sym_eigenvalues(m).into_iter().fold(0.0, |acc, v| acc.max(fmath::abs(v)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spd3() -> Mat {
        // 3x3 with known factor: L = [[2,0,0],[6,1,0],[-8,5,3]]
        Mat::from_fn(3, |i, j| {
            let vals = [[4.0, 12.0, -16.0], [12.0, 37.0, -43.0], [-16.0, -43.0, 98.0]];
            vals[i][j]
        })
    }

    #[test]
    fn cholesky_known_factor() {
        let c = Cholesky::new(&spd3()).unwrap();
        assert!((c.det() - (2.0 * 1.0 * 3.0f64).powi(2)).abs() < 1e-9);
    }

    #[test]
    fn cholesky_solve_round_trip() {
        let m = spd3();
        let c = Cholesky::new(&m).unwrap();
        let b = [1.0, -2.0, 3.5];
        let x = c.solve(&b);
        let back = m.matvec(&x);
        for i in 0..3 {
            assert!((back[i] - b[i]).abs() < 1e-9, "{back:?}");
        }
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let m = Mat::from_fn(2, |i, j| if i == j { -1.0 } else { 0.0 });
        assert_eq!(Cholesky::new(&m).unwrap_err().pivot, 1);
    }

    #[test]
    fn quad_form_via_factor_matches_direct() {
        let m = spd3();
        let c = Cholesky::new(&m).unwrap();
        let x = [0.3, -1.2, 0.7];
        let direct = m.quad_form(&x);
        let via = c.quad_form_via_factor(&x);
        assert!((direct - via).abs() <= 1e-10 * direct.abs().max(1.0));
    }

    #[test]
    fn lu_det_matches_cholesky_and_handles_sign() {
        let m = spd3();
        let c = Cholesky::new(&m).unwrap();
        assert!((det_lu(&m) - c.det()).abs() < 1e-8);
        let flip = Mat::from_fn(2, |i, j| [[0.0, 1.0], [1.0, 0.0]][i][j]);
        assert!((det_lu(&flip) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn jacobi_eigenvalues() {
        let m = Mat::from_fn(2, |i, j| [[2.0, 1.0], [1.0, 2.0]][i][j]);
        let mut eig = sym_eigenvalues(&m);
        eig.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!((eig[0] - 1.0).abs() < 1e-12);
        assert!((eig[1] - 3.0).abs() < 1e-12);
        assert!((sym_min_eigenvalue(&m) - 1.0).abs() < 1e-12);
        assert!((sym_spectral_norm(&m) - 3.0).abs() < 1e-12);
    }
}
