//! Small dense linear-algebra helpers shared across modules.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// `(M + Mᵀ) / 2`.
pub fn symmetrize(m: &Matrix) -> Matrix {
    (m + m.transpose()) * 0.5
}

/// Largest absolute entry of `M − Mᵀ`.
pub fn asymmetry(m: &Matrix) -> f64 {
    if !m.is_square() {
        return f64::INFINITY;
    }
    let mut worst = 0.0_f64;
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

/// Eigenvalues of the symmetric part of `m`, ascending.
pub fn sym_eigenvalues(m: &Matrix) -> Vec<f64> {
    let mut ev: Vec<f64> = SymmetricEigen::new(symmetrize(m)).eigenvalues.iter().copied().collect();
    ev.sort_by(|a, b| a.total_cmp(b));
    ev
}

pub fn min_eigenvalue(m: &Matrix) -> f64 {
    if m.nrows() == 0 {
        return f64::INFINITY;
    }
    sym_eigenvalues(m)[0]
}

pub fn max_eigenvalue(m: &Matrix) -> f64 {
    if m.nrows() == 0 {
        return f64::NEG_INFINITY;
    }
    *sym_eigenvalues(m).last().unwrap()
}

/// A factor `F` with `F Fᵀ = M` for symmetric PSD `M`; negative eigenvalues
/// (round-off) are clipped to zero. Exact zero for `M = 0`.
pub fn psd_factor(m: &Matrix) -> Matrix {
    if m.iter().all(|v| *v == 0.0) {
        return Matrix::zeros(m.nrows(), m.ncols());
    }
    if let Some(chol) = m.clone().cholesky() {
        return chol.l();
    }
    let eig = SymmetricEigen::new(symmetrize(m));
    let mut f = eig.eigenvectors.clone();
    for (j, lambda) in eig.eigenvalues.iter().enumerate() {
        let s = lambda.max(0.0).sqrt();
        f.column_mut(j).scale_mut(s);
    }
    f
}

pub fn frobenius(m: &Matrix) -> f64 {
    m.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn outer(a: &Vector, b: &Vector) -> Matrix {
    a * b.transpose()
}

/// Builds a matrix from row-major nested vectors. Rejects ragged input.
pub fn matrix_from_rows(rows: &[Vec<f64>]) -> Result<Matrix, String> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err("ragged matrix rows".to_string());
    }
    Ok(Matrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

pub fn matrix_to_rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect()).collect()
}

pub fn vector_to_vec(v: &Vector) -> Vec<f64> {
    v.iter().copied().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psd_factor_reconstructs_semidefinite_matrix() {
        let m = Matrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let f = psd_factor(&m);
        assert!((&f * f.transpose() - &m).abs().max() < 1e-12);
        assert_eq!(psd_factor(&Matrix::zeros(2, 2)), Matrix::zeros(2, 2));
    }

    #[test]
    fn ragged_rows_rejected() {
        assert!(matrix_from_rows(&[vec![1.0, 2.0], vec![3.0]]).is_err());
    }
}
