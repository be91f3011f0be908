//! Small dense solves for the d×d normal equations.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative eigenvalue floor below which an unregularized Gram matrix is
/// treated as singular.
const SINGULAR_RTOL: f64 = 1e-12;

/// Accumulates `x xᵀ · weight` into a row-major d×d Gram matrix.
pub(crate) fn add_outer(gram: &mut [f64], x: &[f64], weight: f64) {
    let d = x.len();
    for i in 0..d {
        let wi = weight * x[i];
        for j in 0..d {
            gram[i * d + j] += wi * x[j];
        }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Solves `(G + ridge·I) w = b` for a symmetric positive semi-definite `G`.
///
/// With `ridge == 0` a numerically singular `G` is rejected with
/// [`Error::RankDeficient`].
pub fn solve_ridge(gram: &[f64], rhs: &[f64], ridge: f64) -> Result<Vec<f64>> {
    let d = rhs.len();
    if gram.len() != d * d {
        return Err(Error::DimensionMismatch(format!(
            "gram has {} entries, expected {}",
            gram.len(),
            d * d
        )));
    }
    if !(ridge >= 0.0) || !ridge.is_finite() {
        return Err(Error::invalid(format!("ridge must be finite and ≥ 0, got {ridge}")));
    }
    let mut g = DMatrix::from_row_slice(d, d, gram);
    if ridge == 0.0 {
        let eig = g.clone().symmetric_eigenvalues();
        let max = eig.iter().cloned().fold(0.0_f64, f64::max);
        let min = eig.iter().cloned().fold(f64::INFINITY, f64::min);
        if max <= 0.0 || min <= SINGULAR_RTOL * max {
            return Err(Error::RankDeficient);
        }
    } else {
        for i in 0..d {
            g[(i, i)] += ridge;
        }
    }
    let b = DVector::from_column_slice(rhs);
    let chol = g.cholesky().ok_or(Error::RankDeficient)?;
    Ok(chol.solve(&b).iter().copied().collect())
}

/// Minimum-norm solution of `G w = b` for symmetric positive semi-definite `G`
/// (pseudo-inverse restricted to the numerical range of `G`).
pub fn solve_min_norm(gram: &[f64], rhs: &[f64]) -> Result<Vec<f64>> {
    let d = rhs.len();
    if gram.len() != d * d {
        return Err(Error::DimensionMismatch(format!(
            "gram has {} entries, expected {}",
            gram.len(),
            d * d
        )));
    }
    let g = DMatrix::from_row_slice(d, d, gram);
    let eig = g.symmetric_eigen();
    let max = eig.eigenvalues.iter().cloned().fold(0.0_f64, f64::max);
    if max <= 0.0 {
        return Ok(vec![0.0; d]);
    }
    let b = DVector::from_column_slice(rhs);
    let mut w = DVector::zeros(d);
    for (k, &lam) in eig.eigenvalues.iter().enumerate() {
        if lam > SINGULAR_RTOL * max {
            let v = eig.eigenvectors.column(k);
            w += v * (v.dot(&b) / lam);
        }
    }
    Ok(w.iter().copied().collect())
}

/// Least-squares solution of `X w = y` for a tall row-major `X` (m×d), with
/// the numerical rank of `X`.
pub fn least_squares(x: &[f64], rows: usize, cols: usize, y: &[f64]) -> Result<(Vec<f64>, usize)> {
    if x.len() != rows * cols || y.len() != rows {
        return Err(Error::DimensionMismatch(format!(
            "design is {rows}×{cols} with {} entries and {} targets",
            x.len(),
            y.len()
        )));
    }
    let m = DMatrix::from_row_slice(rows, cols, x);
    let svd = m.svd(true, true);
    let smax = svd.singular_values.iter().cloned().fold(0.0_f64, f64::max);
    let tol = smax * 1e-10 * (rows.max(cols) as f64);
    let rank = svd.singular_values.iter().filter(|&&s| s > tol).count();
    let b = DVector::from_column_slice(y);
    let w = svd
        .solve(&b, tol)
        .map_err(|e| Error::invalid(format!("least squares failed: {e}")))?;
    Ok((w.iter().copied().collect(), rank))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ridge_solves_spd_system() {
        let g = [4.0, 1.0, 1.0, 3.0];
        let b = [1.0, 2.0];
        let w = solve_ridge(&g, &b, 0.0).unwrap();
        assert!((4.0 * w[0] + w[1] - 1.0).abs() < 1e-12);
        assert!((w[0] + 3.0 * w[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn singular_without_ridge_is_rejected() {
        let g = [1.0, 1.0, 1.0, 1.0];
        assert!(matches!(solve_ridge(&g, &[1.0, 1.0], 0.0), Err(Error::RankDeficient)));
        assert!(solve_ridge(&g, &[1.0, 1.0], 1e-6).is_ok());
    }

    #[test]
    fn min_norm_ignores_null_space() {
        let g = [1.0, 1.0, 1.0, 1.0];
        let w = solve_min_norm(&g, &[2.0, 2.0]).unwrap();
        assert!((w[0] - 1.0).abs() < 1e-12 && (w[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn least_squares_reports_rank() {
        let x = [1.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        let (w, rank) = least_squares(&x, 3, 2, &[2.0, 3.0, 5.0]).unwrap();
        assert_eq!(rank, 2);
        assert!((w[0] - 2.0).abs() < 1e-10 && (w[1] - 3.0).abs() < 1e-10);
        let dup = [1.0, 2.0, 2.0, 4.0, 3.0, 6.0];
        let (_, rank) = least_squares(&dup, 3, 2, &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(rank, 1);
    }
}
