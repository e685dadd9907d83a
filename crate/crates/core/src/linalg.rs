//! Small dense linear-algebra kernels: a cyclic Jacobi eigensolver for
//! symmetric matrices, matrix norms, power iteration for spectral norms,
//! and Gauss-Jordan inversion with a condition estimate.
//!
//! Everything here is sized for desk-scale problems (matrices up to a few
//! thousand rows); no BLAS backend is involved so results are bit-for-bit
//! reproducible across machines.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};

/// Off-diagonal Frobenius tolerance for the Jacobi sweep, relative to the
/// matrix scale (with a floor of 1 so the zero matrix converges trivially).
pub const JACOBI_TOL: f64 = 1e-12;
/// Sweep cap for the Jacobi eigensolver.
pub const JACOBI_MAX_SWEEPS: usize = 100;

/// Eigendecomposition of a symmetric matrix.
///
/// Eigenvalues are sorted in descending order; `vectors` holds the matching
/// eigenvectors as columns.
#[derive(Debug, Clone)]
pub struct SymmetricEigen {
    pub values: Vec<f64>,
    pub vectors: Array2<f64>,
}

fn off_diagonal_frobenius(a: &Array2<f64>) -> f64 {
    let n = a.nrows();
    let mut sum = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                sum += a[[i, j]] * a[[i, j]];
            }
        }
    }
    sum.sqrt()
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
///
/// Iterates row-cyclic Jacobi rotations until the off-diagonal Frobenius norm
/// drops below `JACOBI_TOL * max(1, ||A||_F)` or the sweep cap is hit, in
/// which case an [`Error::EigenNonConvergence`] carrying the residual is
/// returned.
pub fn symmetric_eigen(a: &Array2<f64>) -> Result<SymmetricEigen> {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "symmetric_eigen requires a square matrix");
    let mut m = a.clone();
    let mut v = Array2::<f64>::eye(n);
    let scale = frobenius(a).max(1.0);
    let tol = JACOBI_TOL * scale;

    if n <= 1 {
        return Ok(sorted_eigen(m, v));
    }

    for _ in 0..JACOBI_MAX_SWEEPS {
        if off_diagonal_frobenius(&m) <= tol {
            return Ok(sorted_eigen(m, v));
        }
        for p in 0..n - 1 {
            for q in p + 1..n {
                let apq = m[[p, q]];
                if apq.abs() <= tol / (n as f64) {
                    continue;
                }
                let app = m[[p, p]];
                let aqq = m[[q, q]];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                // Rotate rows/columns p and q.
                for k in 0..n {
                    let mkp = m[[k, p]];
                    let mkq = m[[k, q]];
                    m[[k, p]] = c * mkp - s * mkq;
                    m[[k, q]] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[[p, k]];
                    let mqk = m[[q, k]];
                    m[[p, k]] = c * mpk - s * mqk;
                    m[[q, k]] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[[k, p]];
                    let vkq = v[[k, q]];
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }

    let residual = off_diagonal_frobenius(&m);
    if residual <= tol {
        Ok(sorted_eigen(m, v))
    } else {
        Err(Error::EigenNonConvergence { residual })
    }
}

fn sorted_eigen(m: Array2<f64>, v: Array2<f64>) -> SymmetricEigen {
    let n = m.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[[j, j]].partial_cmp(&m[[i, i]]).unwrap());
    let values: Vec<f64> = order.iter().map(|&i| m[[i, i]]).collect();
    let mut vectors = Array2::<f64>::zeros((n, n));
    for (new, &old) in order.iter().enumerate() {
        for r in 0..n {
            vectors[[r, new]] = v[[r, old]];
        }
    }
    SymmetricEigen { values, vectors }
}

/// Frobenius norm.
pub fn frobenius(a: &Array2<f64>) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Maximum absolute row sum (the operator inf-norm).
pub fn norm_inf(a: &Array2<f64>) -> f64 {
    a.rows()
        .into_iter()
        .map(|r| r.iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Maximum absolute column sum (the operator 1-norm).
pub fn norm_one(a: &Array2<f64>) -> f64 {
    let mut best = 0.0f64;
    for j in 0..a.ncols() {
        let s: f64 = a.column(j).iter().map(|x| x.abs()).sum();
        best = best.max(s);
    }
    best
}

/// Convergence tolerance for power iteration.
pub const POWER_ITER_TOL: f64 = 1e-10;
const POWER_ITER_CAP: usize = 100_000;

/// Spectral norm of a rectangular matrix via power iteration on `AᵀA`.
///
/// The start vector is deterministic so repeated calls agree bit-for-bit.
pub fn spectral_norm(a: &Array2<f64>) -> f64 {
    let n = a.ncols();
    if a.iter().all(|&x| x == 0.0) {
        return 0.0;
    }
    // Deterministic, generically non-orthogonal start vector.
    let mut v = Array1::from_shape_fn(n, |j| 1.0 + (j as f64 + 1.0) * 1e-3);
    let norm = v.dot(&v).sqrt();
    v.mapv_inplace(|x| x / norm);

    let mut lambda = 0.0f64;
    for _ in 0..POWER_ITER_CAP {
        let w = a.t().dot(&a.dot(&v));
        let new_lambda = v.dot(&w);
        let wn = w.dot(&w).sqrt();
        if wn == 0.0 {
            return 0.0;
        }
        v = w / wn;
        if (new_lambda - lambda).abs() <= POWER_ITER_TOL * new_lambda.abs().max(1.0) {
            return new_lambda.max(0.0).sqrt();
        }
        lambda = new_lambda;
    }
    lambda.max(0.0).sqrt()
}

/// Gauss-Jordan inverse with partial pivoting.
///
/// Returns the inverse together with a 1-norm condition estimate
/// `||A||_1 * ||A^-1||_1`. Singularity (a zero pivot) is reported as an
/// infinite condition number through [`Error::SingularMatrix`].
pub fn invert(a: &Array2<f64>, context: &str) -> Result<(Array2<f64>, f64)> {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "invert requires a square matrix");
    let mut aug = Array2::<f64>::zeros((n, 2 * n));
    for i in 0..n {
        for j in 0..n {
            aug[[i, j]] = a[[i, j]];
        }
        aug[[i, n + i]] = 1.0;
    }
    for col in 0..n {
        let mut pivot = col;
        for r in col + 1..n {
            if aug[[r, col]].abs() > aug[[pivot, col]].abs() {
                pivot = r;
            }
        }
        if aug[[pivot, col]].abs() < 1e-300 {
            return Err(Error::SingularMatrix {
                context: context.to_string(),
                cond: f64::INFINITY,
            });
        }
        if pivot != col {
            for j in 0..2 * n {
                let tmp = aug[[col, j]];
                aug[[col, j]] = aug[[pivot, j]];
                aug[[pivot, j]] = tmp;
            }
        }
        let p = aug[[col, col]];
        for j in 0..2 * n {
            aug[[col, j]] /= p;
        }
        for r in 0..n {
            if r != col {
                let f = aug[[r, col]];
                if f != 0.0 {
                    for j in 0..2 * n {
                        aug[[r, j]] -= f * aug[[col, j]];
                    }
                }
            }
        }
    }
    let inv = Array2::from_shape_fn((n, n), |(i, j)| aug[[i, n + j]]);
    let cond = norm_one(a) * norm_one(&inv);
    Ok((inv, cond))
}

/// Flatten a matrix into a vector in row-major order.
///
/// This is the vectorization convention used for every per-layer quantity in
/// this crate (distance vectors, Hessian indexing, checkpoint payloads).
pub fn flatten_row_major(a: &Array2<f64>) -> Array1<f64> {
    Array1::from_iter(a.rows().into_iter().flat_map(|r| r.to_vec()))
}

/// Inverse of [`flatten_row_major`].
pub fn unflatten_row_major(v: &Array1<f64>, rows: usize, cols: usize) -> Array2<f64> {
    assert_eq!(v.len(), rows * cols);
    Array2::from_shape_fn((rows, cols), |(i, j)| v[i * cols + j])
}
