//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Symmetric part `(m + mᵀ) / 2`.
pub fn sym(m: &Mat) -> Mat {
    (m + m.transpose()) * 0.5
}

/// Smallest eigenvalue of the symmetric part of `m`.
pub fn min_eigenvalue(m: &Mat) -> f64 {
    if m.nrows() == 0 {
        return f64::INFINITY;
    }
    sym(m).symmetric_eigenvalues().min()
}

/// Largest eigenvalue of the symmetric part of `m`.
pub fn max_eigenvalue(m: &Mat) -> f64 {
    if m.nrows() == 0 {
        return f64::NEG_INFINITY;
    }
    sym(m).symmetric_eigenvalues().max()
}

/// Spectral radius of a square (possibly non-symmetric) matrix.
pub fn spectral_radius(m: &Mat) -> f64 {
    m.complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}

/// Inverse of a symmetric positive-definite matrix, `None` if the Cholesky
/// factorization fails.
pub fn spd_inverse(m: &Mat) -> Option<Mat> {
    let inv = sym(m).cholesky()?.inverse();
    Some(sym(&inv))
}

/// `log det` of a symmetric positive-definite matrix.
pub fn spd_log_det(m: &Mat) -> Option<f64> {
    let chol = sym(m).cholesky()?;
    let l = chol.l_dirty();
    Some((0..m.nrows()).map(|i| 2.0 * l[(i, i)].ln()).sum())
}

/// Singular values, largest first.
pub fn singular_values(m: &Mat) -> Vec<f64> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return Vec::new();
    }
    let mut s: Vec<f64> = m.singular_values().iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

/// Number of singular values above `rel_tol` times the largest one.
pub fn numerical_rank(m: &Mat, rel_tol: f64) -> usize {
    let s = singular_values(m);
    match s.first() {
        Some(&smax) if smax > 0.0 => s.iter().filter(|&&v| v > rel_tol * smax).count(),
        _ => 0,
    }
}

/// Moore-Penrose pseudo-inverse.
pub fn pinv(m: &Mat) -> Mat {
    let smax = singular_values(m).first().copied().unwrap_or(0.0);
    let eps = 1e-12 * smax.max(f64::MIN_POSITIVE);
    m.clone()
        .pseudo_inverse(eps)
        .unwrap_or_else(|_| Mat::zeros(m.ncols(), m.nrows()))
}

pub fn vstack(blocks: &[&Mat]) -> Mat {
    let cols = blocks.first().map_or(0, |b| b.ncols());
    let rows = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = Mat::zeros(rows, cols);
    let mut r = 0;
    for b in blocks {
        debug_assert_eq!(b.ncols(), cols);
        out.view_mut((r, 0), (b.nrows(), cols)).copy_from(*b);
        r += b.nrows();
    }
    out
}

pub fn hstack(blocks: &[&Mat]) -> Mat {
    let rows = blocks.first().map_or(0, |b| b.nrows());
    let cols = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = Mat::zeros(rows, cols);
    let mut c = 0;
    for b in blocks {
        debug_assert_eq!(b.nrows(), rows);
        out.view_mut((0, c), (rows, b.ncols())).copy_from(*b);
        c += b.ncols();
    }
    out
}

/// Assemble a 2×2 block matrix.
pub fn block2(a: &Mat, b: &Mat, c: &Mat, d: &Mat) -> Mat {
    vstack(&[&hstack(&[a, b]), &hstack(&[c, d])])
}

pub fn block_diag(blocks: &[&Mat]) -> Mat {
    let rows = blocks.iter().map(|b| b.nrows()).sum();
    let cols = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = Mat::zeros(rows, cols);
    let (mut r, mut c) = (0, 0);
    for b in blocks {
        out.view_mut((r, c), (b.nrows(), b.ncols())).copy_from(*b);
        r += b.nrows();
        c += b.ncols();
    }
    out
}

pub fn all_finite(m: &Mat) -> bool {
    m.iter().all(|v| v.is_finite())
}

/// Row-major nested vectors, the layout used by the JSON file formats.
pub fn to_rows(m: &Mat) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| m.row(i).iter().copied().collect())
        .collect()
}

/// Inverse of [`to_rows`]; `cols` is needed to shape empty matrices.
pub fn from_rows(rows: &[Vec<f64>], cols: usize) -> Option<Mat> {
    if rows.iter().any(|r| r.len() != cols) {
        return None;
    }
    Some(Mat::from_fn(rows.len(), cols, |i, j| rows[i][j]))
}
