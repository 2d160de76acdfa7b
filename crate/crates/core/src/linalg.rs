//! Small dense kernels on row-major slices.
//!
//! The REML objective is evaluated tens of thousands of times per bootstrap
//! run on matrices no larger than the number of treatments, so the hot path
//! works on caller-owned buffers instead of allocating `DMatrix` values.

use nalgebra::{DMatrix, DVector};

use crate::error::{NmaError, Result};

/// In-place lower Cholesky factorisation of the `n x n` row-major matrix `a`.
/// Only the lower triangle is read; the strict upper triangle is zeroed.
/// Returns `false` when a pivot is not strictly positive.
pub fn cholesky_in_place(a: &mut [f64], n: usize) -> bool {
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= a[j * n + k] * a[j * n + k];
        }
        if !(d > 0.0) || !d.is_finite() {
            return false;
        }
        let djj = d.sqrt();
        a[j * n + j] = djj;
        for i in (j + 1)..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = s / djj;
        }
        for i in 0..j {
            a[i * n + j] = 0.0;
        }
    }
    true
}

/// `log det` of the matrix whose Cholesky factor is `l`.
pub fn chol_logdet(l: &[f64], n: usize) -> f64 {
    (0..n).map(|i| l[i * n + i].ln()).sum::<f64>() * 2.0
}

/// Solves `L Lᵀ x = b` in place.
pub fn chol_solve_in_place(l: &[f64], n: usize, b: &mut [f64]) {
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * n + k] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in (i + 1)..n {
            s -= l[k * n + i] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
}

/// Writes the inverse of `L Lᵀ` into `out` (row-major, full symmetric).
pub fn chol_inverse(l: &[f64], n: usize, out: &mut [f64], col: &mut [f64]) {
    for j in 0..n {
        col[..n].fill(0.0);
        col[j] = 1.0;
        chol_solve_in_place(l, n, &mut col[..n]);
        for i in 0..n {
            out[i * n + j] = col[i];
        }
    }
}

pub fn to_row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let (r, c) = m.shape();
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        for j in 0..c {
            out.push(m[(i, j)]);
        }
    }
    out
}

pub fn from_row_major(n: usize, data: &[f64]) -> DMatrix<f64> {
    DMatrix::from_row_slice(n, n, data)
}

/// Symmetrises `m` by averaging with its transpose.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Inverse of a symmetric positive definite matrix via Cholesky.
pub fn spd_inverse(m: &DMatrix<f64>, context: &str) -> Result<DMatrix<f64>> {
    let chol = symmetrize(m)
        .cholesky()
        .ok_or_else(|| NmaError::NotPositiveDefinite(context.to_string()))?;
    Ok(symmetrize(&chol.inverse()))
}

/// `vᵀ M⁻¹ v` for symmetric positive definite `M`.
pub fn quadratic_form_inv(v: &DVector<f64>, m: &DMatrix<f64>, context: &str) -> Result<f64> {
    if v.len() != m.nrows() || m.nrows() != m.ncols() {
        return Err(NmaError::DimensionMismatch(context.to_string()));
    }
    let chol = symmetrize(m)
        .cholesky()
        .ok_or_else(|| NmaError::NotPositiveDefinite(context.to_string()))?;
    let x = chol.solve(v);
    Ok(v.dot(&x).max(0.0))
}

pub fn is_positive_definite(m: &DMatrix<f64>) -> bool {
    m.is_square()
        && m.iter().all(|x| x.is_finite())
        && symmetrize(m).cholesky().is_some()
}

/// `τ² P` where `P` has unit diagonal and 0.5 off-diagonal entries.
pub fn half_correlation(k: usize, tau2: f64) -> DMatrix<f64> {
    DMatrix::from_fn(k, k, |i, j| if i == j { tau2 } else { 0.5 * tau2 })
}

/// Lower Cholesky factor, tolerating a zero matrix (returns zeros).
pub fn cholesky_factor_psd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = m.nrows();
    if m.iter().all(|x| *x == 0.0) {
        return Ok(DMatrix::zeros(n, n));
    }
    symmetrize(m)
        .cholesky()
        .map(|c| c.l())
        .ok_or_else(|| NmaError::NotPositiveDefinite("sampling covariance".into()))
}
