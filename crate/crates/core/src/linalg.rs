//! Small dense linear-algebra helpers on top of `nalgebra`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Replaces `m` by `(m + mᵀ) / 2`; the result is symmetric bit-for-bit.
pub fn symmetrize(m: &mut Matrix) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

pub fn symmetrized(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    symmetrize(&mut out);
    out
}

/// Eigenvalues of a symmetric matrix, ascending.
pub fn sym_eigenvalues(m: &Matrix) -> Vec<f64> {
    let mut ev: Vec<f64> = m.clone().symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(|a, b| a.total_cmp(b));
    ev
}

pub fn min_eigenvalue(m: &Matrix) -> f64 {
    sym_eigenvalues(m).first().copied().unwrap_or(0.0)
}

/// Largest singular value.
pub fn op_norm(m: &Matrix) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.clone()
        .singular_values()
        .iter()
        .fold(0.0_f64, |a, &b| a.max(b))
}

/// Projects a symmetric matrix onto the PSD cone by clipping negative
/// eigenvalues to zero. Returns the repaired matrix and whether any
/// eigenvalue was clipped.
pub fn clip_psd(m: &Matrix) -> (Matrix, bool) {
    let sym = symmetrized(m);
    let eig = sym.clone().symmetric_eigen();
    if eig.eigenvalues.iter().all(|&v| v >= 0.0) {
        return (sym, false);
    }
    let clipped = eig.eigenvalues.map(|v| v.max(0.0));
    let mut out = &eig.eigenvectors * Matrix::from_diagonal(&clipped) * eig.eigenvectors.transpose();
    symmetrize(&mut out);
    (out, true)
}

/// Inverse of a square matrix; `what` names the matrix in the error.
pub fn inverse(m: &Matrix, what: &str) -> Result<Matrix> {
    if m.nrows() != m.ncols() {
        return Err(Error::InvalidInput(format!("{what} is not square")));
    }
    if m.nrows() == 0 {
        return Ok(Matrix::zeros(0, 0));
    }
    let sv = m.clone().singular_values();
    let smax = sv.iter().fold(0.0_f64, |a, &b| a.max(b));
    let smin = sv.iter().fold(f64::INFINITY, |a, &b| a.min(b));
    if !(smax.is_finite()) || smin <= smax * 1e-13 {
        return Err(Error::Numerical(format!(
            "{what} is singular (condition number {:.3e})",
            if smin > 0.0 { smax / smin } else { f64::INFINITY }
        )));
    }
    m.clone()
        .try_inverse()
        .ok_or_else(|| Error::Numerical(format!("{what} could not be inverted")))
}

/// Lower-triangular factor `L` with `L Lᵀ = m` for a symmetric positive
/// semidefinite matrix. Pivots below `1e-12 · max diag` are treated as
/// zero and their columns left empty, so rank-deficient inputs are
/// accepted. Fails on a clearly negative pivot.
pub fn psd_cholesky(m: &Matrix) -> Result<Matrix> {
    let n = m.nrows();
    let scale = (0..n).map(|i| m[(i, i)].abs()).fold(0.0_f64, f64::max);
    let tol = 1e-12 * scale.max(f64::MIN_POSITIVE);
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = m[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if d < -1e-8 * scale.max(1.0) {
            return Err(Error::Numerical(format!(
                "matrix is not positive semidefinite (pivot {j} = {d:.3e})"
            )));
        }
        if d <= tol {
            continue;
        }
        let ljj = d.sqrt();
        l[(j, j)] = ljj;
        for i in (j + 1)..n {
            let mut s = m[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / ljj;
        }
    }
    Ok(l)
}

/// No-intercept least squares `argmin ‖y − Xb‖²`.
///
/// Columns are rescaled to unit norm before a Householder QR; a column whose
/// diagonal of `R` falls below `1e-10` of the largest is reported as
/// linearly dependent on the preceding ones.
pub fn least_squares(x: &Matrix, y: &[f64]) -> Result<Vector> {
    let (n, p) = x.shape();
    if y.len() != n {
        return Err(Error::InvalidInput(format!(
            "response has {} entries, design has {n} rows",
            y.len()
        )));
    }
    if n < p {
        return Err(Error::InvalidInput(format!(
            "{n} points cannot determine {p} coefficients"
        )));
    }
    let mut scaled = x.clone();
    let mut scales = vec![1.0; p];
    for (j, s) in scales.iter_mut().enumerate() {
        let norm = scaled.column(j).norm();
        if norm > 0.0 {
            *s = norm;
            scaled.column_mut(j).scale_mut(1.0 / norm);
        }
    }
    let qr = scaled.qr();
    let r = qr.r();
    let rmax = (0..p).map(|j| r[(j, j)].abs()).fold(0.0_f64, f64::max);
    let deficient: Vec<usize> = (0..p)
        .filter(|&j| r[(j, j)].abs() <= 1e-10 * rmax.max(f64::MIN_POSITIVE))
        .collect();
    if !deficient.is_empty() {
        return Err(Error::Numerical(format!(
            "rank-deficient design: columns {deficient:?} are linearly dependent on earlier columns"
        )));
    }
    let qty = qr.q().transpose() * Vector::from_column_slice(y);
    let coef = r
        .solve_upper_triangular(&qty)
        .ok_or_else(|| Error::Numerical("triangular solve failed".into()))?;
    Ok(Vector::from_iterator(
        p,
        coef.iter().zip(&scales).map(|(c, s)| c / s),
    ))
}

pub fn to_rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

pub fn from_rows(rows: &[Vec<f64>]) -> Result<Matrix> {
    let nr = rows.len();
    let nc = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != nc) {
        return Err(Error::InvalidInput("ragged matrix rows".into()));
    }
    Ok(Matrix::from_fn(nr, nc, |i, j| rows[i][j]))
}

/// Serde adapter writing a matrix as a list of rows.
pub mod serde_rows {
    use super::{from_rows, to_rows, Matrix};
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &Matrix, s: S) -> Result<S::Ok, S::Error> {
        to_rows(m).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Matrix, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        from_rows(&rows).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn least_squares_exact_fit() {
        let x = Matrix::from_row_slice(4, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 2.0, -1.0]);
        let y: Vec<f64> = (0..4).map(|i| 3.0 * x[(i, 0)] - 0.5 * x[(i, 1)]).collect();
        let b = least_squares(&x, &y).unwrap();
        assert!((b[0] - 3.0).abs() < 1e-12 && (b[1] + 0.5).abs() < 1e-12);
    }

    #[test]
    fn least_squares_reports_dependent_column() {
        let x = Matrix::from_row_slice(3, 2, &[1.0, 2.0, 2.0, 4.0, 3.0, 6.0]);
        let err = least_squares(&x, &[1.0, 2.0, 3.0]).unwrap_err();
        assert!(err.to_string().contains("[1]"), "{err}");
    }

    #[test]
    fn psd_cholesky_handles_rank_one() {
        let v = Vector::from_vec(vec![1.0, 2.0, -1.0]);
        let m = &v * v.transpose();
        let l = psd_cholesky(&m).unwrap();
        assert!((&l * l.transpose() - &m).amax() < 1e-12);
        assert!(psd_cholesky(&Matrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0])).is_err());
    }

    #[test]
    fn clip_psd_removes_negative_eigenvalues() {
        let m = Matrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        let (c, adjusted) = clip_psd(&m);
        assert!(adjusted);
        assert!(min_eigenvalue(&c) >= -1e-12);
        let (same, adj) = clip_psd(&Matrix::identity(2, 2));
        assert!(!adj);
        assert_eq!(same, Matrix::identity(2, 2));
    }

    #[test]
    fn inverse_rejects_singular() {
        let m = Matrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(matches!(inverse(&m, "m"), Err(Error::Numerical(_))));
    }
}
