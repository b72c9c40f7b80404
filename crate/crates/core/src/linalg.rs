use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{GeeError, Result};

/// Diagonal ridge applied when a working correlation fails to factor.
pub(crate) const RIDGE: f64 = 1e-10;

pub(crate) fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return f64::INFINITY;
    }
    SymmetricEigen::new(m.clone())
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

pub(crate) fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Cholesky factor of a symmetric positive-definite matrix, retrying once
/// with `RIDGE` added to the diagonal.
pub(crate) fn cholesky_with_ridge(m: &DMatrix<f64>) -> Option<Cholesky<f64, Dyn>> {
    if let Some(c) = Cholesky::new(m.clone()) {
        return Some(c);
    }
    let n = m.nrows();
    Cholesky::new(m + DMatrix::identity(n, n) * RIDGE)
}

pub(crate) fn spd_inverse(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let chol = cholesky_with_ridge(m).ok_or_else(|| GeeError::Singular(what.to_string()))?;
    let mut inv = chol.inverse();
    symmetrize(&mut inv);
    Ok(inv)
}

/// Smallest eigenvalue of the unit-diagonal scaling of `info` below which the
/// design is treated as rank deficient.
pub(crate) const RANK_TOLERANCE: f64 = 1e-10;

/// Cholesky factor of an information matrix, rejecting numerically singular
/// ones (after scaling to unit diagonal) with the offending column names.
pub(crate) fn factor_information(
    info: &DMatrix<f64>,
    names: &[String],
) -> Result<Cholesky<f64, Dyn>> {
    let deficient = || GeeError::RankDeficient {
        columns: collinear_columns(info, names),
    };
    let k = info.nrows();
    if (0..k).any(|j| info[(j, j)].is_nan() || info[(j, j)] <= 0.0) {
        return Err(deficient());
    }
    let scaled = DMatrix::from_fn(k, k, |i, j| {
        info[(i, j)] / (info[(i, i)] * info[(j, j)]).sqrt()
    });
    if min_eigenvalue(&scaled) < RANK_TOLERANCE {
        return Err(deficient());
    }
    Cholesky::new(info.clone()).ok_or_else(deficient)
}

/// Columns loading on the smallest eigenvalue of a scaled information matrix.
pub(crate) fn collinear_columns(info: &DMatrix<f64>, names: &[String]) -> Vec<String> {
    let k = info.nrows();
    let scale: DVector<f64> = DVector::from_iterator(
        k,
        (0..k).map(|j| {
            let d = info[(j, j)];
            if d > 0.0 {
                1.0 / d.sqrt()
            } else {
                1.0
            }
        }),
    );
    let scaled = DMatrix::from_fn(k, k, |i, j| info[(i, j)] * scale[i] * scale[j]);
    let eig = SymmetricEigen::new(scaled);
    let (idx, _) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .fold(
            (0, f64::INFINITY),
            |acc, (i, &v)| if v < acc.1 { (i, v) } else { acc },
        );
    let vec = eig.eigenvectors.column(idx);
    let mut out: Vec<String> = (0..k)
        .filter(|&j| info[(j, j)] <= 0.0 || vec[j].abs() > 0.1)
        .map(|j| {
            names
                .get(j)
                .cloned()
                .unwrap_or_else(|| format!("column {j}"))
        })
        .collect();
    if out.is_empty() {
        out = names.to_vec();
    }
    out
}

/// Square-root factor `L` with `L Lᵀ = m` for a symmetric PSD matrix. Falls back
/// to the eigen decomposition when the matrix is singular.
pub(crate) fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    if let Some(c) = Cholesky::new(m.clone()) {
        return c.l();
    }
    let eig = SymmetricEigen::new(m.clone());
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ridge_rescues_semidefinite_matrix() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(Cholesky::new(m.clone()).is_none());
        assert!(cholesky_with_ridge(&m).is_some());
    }

    #[test]
    fn psd_sqrt_reconstructs_singular_matrix() {
        let m = DMatrix::from_row_slice(3, 3, &[1.0, 1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        let l = psd_sqrt(&m);
        assert!((&l * l.transpose() - m).abs().max() < 1e-12);
    }

    #[test]
    fn collinear_columns_are_named() {
        let names: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        // column c duplicates column b
        let x = DMatrix::from_row_slice(4, 3, &[1., 1., 1., 1., 2., 2., 1., 3., 3., 1., 5., 5.]);
        let info = x.transpose() * &x;
        let cols = collinear_columns(&info, &names);
        assert!(cols.contains(&"b".to_string()) && cols.contains(&"c".to_string()));
    }
}
