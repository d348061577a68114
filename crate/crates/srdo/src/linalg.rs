//! Minimal dense linear algebra shared by the whole crate.
//!
//! Everything here is sized for the problem at hand: decode fits over a
//! handful of columns, normal equations up to a few hundred. Least squares
//! goes through Householder QR with a fixed pivot threshold; eigenvalue
//! extremes come from (inverse) power iteration. No BLAS, no sparsity.

use thiserror::Error;

use crate::rng::Rng;

/// Pivot threshold below which a triangular factor is treated as rank
/// deficient.
pub const PIVOT_TOL: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum LinalgError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("rank deficient system: |R[{index},{index}]| = {pivot:e} below threshold")]
    RankDeficient { index: usize, pivot: f64 },
    #[error(
        "power iteration did not converge after {iters} iterations (best estimate {estimate})"
    )]
    NoConvergence { iters: usize, estimate: f64 },
}

/// Dense row-major matrix of f64.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Matrix {
            rows: r,
            cols: c,
            data,
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols);
        Matrix { rows, cols, data }
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    /// Rows `lo..hi` as a new matrix.
    pub fn row_slice(&self, lo: usize, hi: usize) -> Matrix {
        assert!(lo <= hi && hi <= self.rows);
        Matrix {
            rows: hi - lo,
            cols: self.cols,
            data: self.data[lo * self.cols..hi * self.cols].to_vec(),
        }
    }

    /// Select the given rows, in order.
    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut out = Matrix::zeros(idx.len(), self.cols);
        for (r, &i) in idx.iter().enumerate() {
            out.data[r * self.cols..(r + 1) * self.cols].copy_from_slice(self.row(i));
        }
        out
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.cols, "matvec dimension");
        let mut y = vec![0.0; self.rows];
        for i in 0..self.rows {
            let row = self.row(i);
            let mut acc = 0.0;
            for j in 0..self.cols {
                acc += row[j] * x[j];
            }
            y[i] = acc;
        }
        y
    }

    /// y = A^T x without materializing the transpose.
    pub fn matvec_t(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.rows, "matvec_t dimension");
        let mut y = vec![0.0; self.cols];
        for i in 0..self.rows {
            let row = self.row(i);
            let xi = x[i];
            for j in 0..self.cols {
                y[j] += row[j] * xi;
            }
        }
        y
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

pub fn mat_mul(a: &Matrix, b: &Matrix) -> Result<Matrix, LinalgError> {
    if a.cols != b.rows {
        return Err(LinalgError::DimensionMismatch(format!(
            "{}x{} times {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut c = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        for k in 0..a.cols {
            let aik = a[(i, k)];
            if aik == 0.0 {
                continue;
            }
            let brow = b.row(k);
            let crow = &mut c.data[i * b.cols..(i + 1) * b.cols];
            for j in 0..b.cols {
                crow[j] += aik * brow[j];
            }
        }
    }
    Ok(c)
}

// --- vector helpers -------------------------------------------------------

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Euclidean norm, scaled to stay representable for entries near the f64
/// range limits.
pub fn norm2(a: &[f64]) -> f64 {
    let maxabs = a.iter().fold(0.0_f64, |m, &x| m.max(x.abs()));
    if maxabs == 0.0 || !maxabs.is_finite() {
        return maxabs;
    }
    let s: f64 = a
        .iter()
        .map(|&x| {
            let t = x / maxabs;
            t * t
        })
        .sum();
    maxabs * s.sqrt()
}

pub fn axpy(y: &mut [f64], alpha: f64, x: &[f64]) {
    debug_assert_eq!(y.len(), x.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub fn scale(a: &[f64], c: f64) -> Vec<f64> {
    a.iter().map(|x| c * x).collect()
}

// --- norms ----------------------------------------------------------------

/// Max over rows of the row l1 norm (the induced infinity norm).
pub fn norm_inf_rows(a: &Matrix) -> f64 {
    (0..a.rows)
        .map(|i| a.row(i).iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Max over rows of the row l2 norm.
pub fn norm_2inf_rows(a: &Matrix) -> f64 {
    (0..a.rows).map(|i| norm2(a.row(i))).fold(0.0, f64::max)
}

// --- least squares --------------------------------------------------------

/// Solve min_x ||a x - b||_2 by Householder QR. Requires rows >= cols and
/// full column rank (pivot threshold [`PIVOT_TOL`] on the R diagonal).
/// Returns the minimizer together with the residual norm ||a x - b||.
pub fn solve_least_squares(a: &Matrix, b: &[f64]) -> Result<(Vec<f64>, f64), LinalgError> {
    let (m, n) = (a.rows, a.cols);
    if b.len() != m {
        return Err(LinalgError::DimensionMismatch(format!(
            "matrix {}x{} with rhs of length {}",
            m,
            n,
            b.len()
        )));
    }
    if m < n {
        return Err(LinalgError::DimensionMismatch(format!(
            "underdetermined system {m}x{n}"
        )));
    }
    let mut r = a.clone();
    let mut qtb = b.to_vec();
    // Householder reflections applied in place to r and qtb.
    for k in 0..n {
        let mut alpha = 0.0;
        for i in k..m {
            alpha += r[(i, k)] * r[(i, k)];
        }
        alpha = alpha.sqrt();
        if alpha == 0.0 {
            return Err(LinalgError::RankDeficient {
                index: k,
                pivot: 0.0,
            });
        }
        if r[(k, k)] > 0.0 {
            alpha = -alpha;
        }
        let mut v = vec![0.0; m - k];
        v[0] = r[(k, k)] - alpha;
        for i in k + 1..m {
            v[i - k] = r[(i, k)];
        }
        let vnorm2 = dot(&v, &v);
        if vnorm2 > 0.0 {
            for j in k..n {
                let mut s = 0.0;
                for i in k..m {
                    s += v[i - k] * r[(i, j)];
                }
                let f = 2.0 * s / vnorm2;
                for i in k..m {
                    r[(i, j)] -= f * v[i - k];
                }
            }
            let mut s = 0.0;
            for i in k..m {
                s += v[i - k] * qtb[i];
            }
            let f = 2.0 * s / vnorm2;
            for i in k..m {
                qtb[i] -= f * v[i - k];
            }
        }
        r[(k, k)] = alpha;
        for i in k + 1..m {
            r[(i, k)] = 0.0;
        }
    }
    for k in 0..n {
        let pivot = r[(k, k)].abs();
        if pivot < PIVOT_TOL {
            return Err(LinalgError::RankDeficient { index: k, pivot });
        }
    }
    // Back substitution on the upper triangle.
    let mut x = vec![0.0; n];
    for k in (0..n).rev() {
        let mut s = qtb[k];
        for j in k + 1..n {
            s -= r[(k, j)] * x[j];
        }
        x[k] = s / r[(k, k)];
    }
    let residual = norm2(&sub(&a.matvec(&x), b));
    Ok((x, residual))
}

// --- random generation ----------------------------------------------------

pub fn gaussian_matrix(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.gaussian()).collect();
    Matrix::from_vec(rows, cols, data)
}

pub fn uniform_vector(n: usize, lo: f64, hi: f64, rng: &mut Rng) -> Vec<f64> {
    (0..n).map(|_| rng.uniform(lo, hi)).collect()
}

// --- eigenvalue extremes --------------------------------------------------

/// Largest eigenvalue of a symmetric positive semidefinite matrix by power
/// iteration. Converges when the Rayleigh quotient stabilizes to `tol`
/// relative change; errors after `iters` sweeps carrying the best estimate.
pub fn power_iteration_lmax(a: &Matrix, iters: usize, tol: f64) -> Result<f64, LinalgError> {
    assert_eq!(a.rows, a.cols, "power iteration needs a square matrix");
    let n = a.rows;
    if n == 0 {
        return Ok(0.0);
    }
    // Deterministic pseudo-random start; a constant vector risks being
    // orthogonal to the top eigenvector.
    let mut rng = Rng::stream(0x9e1c_55aa, &[n as u64]);
    let mut v = uniform_vector(n, -1.0, 1.0, &mut rng);
    let nv = norm2(&v);
    for x in v.iter_mut() {
        *x /= nv;
    }
    let mut lambda = 0.0;
    for _ in 0..iters {
        let w = a.matvec(&v);
        let nw = norm2(&w);
        if nw == 0.0 {
            return Ok(0.0); // a v = 0 for a PSD matrix means lambda_max = 0 reachable at v
        }
        let next = dot(&v, &w);
        for (vi, wi) in v.iter_mut().zip(&w) {
            *vi = wi / nw;
        }
        if (next - lambda).abs() <= tol * next.abs().max(1e-300) {
            return Ok(next);
        }
        lambda = next;
    }
    Err(LinalgError::NoConvergence {
        iters,
        estimate: lambda,
    })
}

/// Smallest eigenvalue of a symmetric positive definite matrix by inverse
/// iteration (each sweep solves `a w = v` through QR).
pub fn inverse_iteration_lmin(a: &Matrix, iters: usize, tol: f64) -> Result<f64, LinalgError> {
    assert_eq!(a.rows, a.cols);
    let n = a.rows;
    if n == 0 {
        return Ok(0.0);
    }
    let mut rng = Rng::stream(0x51ed_c0de, &[n as u64]);
    let mut v = uniform_vector(n, -1.0, 1.0, &mut rng);
    let nv = norm2(&v);
    for x in v.iter_mut() {
        *x /= nv;
    }
    let mut lambda = 0.0;
    for _ in 0..iters {
        let (w, _) = solve_least_squares(a, &v)?;
        let nw = norm2(&w);
        if nw == 0.0 {
            return Err(LinalgError::RankDeficient {
                index: 0,
                pivot: 0.0,
            });
        }
        let vn: Vec<f64> = w.iter().map(|x| x / nw).collect();
        let next = dot(&vn, &a.matvec(&vn));
        v = vn;
        if (next - lambda).abs() <= tol * next.abs().max(1e-300) {
            return Ok(next);
        }
        lambda = next;
    }
    Err(LinalgError::NoConvergence {
        iters,
        estimate: lambda,
    })
}
