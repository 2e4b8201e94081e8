//! Dense matrix helpers.
//!
//! Every stored matrix holds one example (or class, or node) per row. The
//! numeric carrier is `nalgebra::DMatrix<f64>`; this module adds the
//! validation and row utilities the rest of the crate leans on.

use nalgebra::{DMatrix, RowDVector};

use crate::error::{Result, ZslError};

pub type Matrix = DMatrix<f64>;

/// Builds a matrix from row-major values, enforcing rows, cols >= 1 and finiteness.
pub fn from_row_major(rows: usize, cols: usize, values: &[f64]) -> Result<Matrix> {
    if rows == 0 || cols == 0 {
        return Err(ZslError::InvalidMatrix(format!(
            "matrix must be at least 1x1, got {rows}x{cols}"
        )));
    }
    if values.len() != rows * cols {
        return Err(ZslError::InvalidMatrix(format!(
            "{rows}x{cols} matrix needs {} values, got {}",
            rows * cols,
            values.len()
        )));
    }
    let m = DMatrix::from_row_slice(rows, cols, values);
    validate(&m)?;
    Ok(m)
}

pub fn from_rows(rows: &[Vec<f64>]) -> Result<Matrix> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|row| row.len() != c) {
        return Err(ZslError::InvalidMatrix("ragged rows".into()));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    from_row_major(r, c, &flat)
}

pub fn to_rows(m: &Matrix) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

pub fn to_row_major(m: &Matrix) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.len());
    for r in m.row_iter() {
        out.extend(r.iter());
    }
    out
}

/// Checks the matrix invariants: non-empty and every entry finite.
pub fn validate(m: &Matrix) -> Result<()> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return Err(ZslError::InvalidMatrix(format!(
            "matrix must be at least 1x1, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    if let Some(pos) = m.iter().position(|v| !v.is_finite()) {
        // column-major storage index back to (row, col)
        let (i, j) = (pos % m.nrows(), pos / m.nrows());
        return Err(ZslError::InvalidMatrix(format!(
            "non-finite value at ({i}, {j})"
        )));
    }
    Ok(())
}

pub fn row_vec(m: &Matrix, i: usize) -> Vec<f64> {
    m.row(i).iter().copied().collect()
}

/// Selects rows by index, in the given order.
pub fn select_rows(m: &Matrix, idx: &[usize]) -> Matrix {
    DMatrix::from_fn(idx.len(), m.ncols(), |i, j| m[(idx[i], j)])
}

/// Horizontal concatenation `[a | b]`.
pub fn hconcat(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.nrows() != b.nrows() {
        return Err(ZslError::Shape(format!(
            "hconcat row mismatch: {} vs {}",
            a.nrows(),
            b.nrows()
        )));
    }
    let mut out = DMatrix::zeros(a.nrows(), a.ncols() + b.ncols());
    out.view_mut((0, 0), (a.nrows(), a.ncols())).copy_from(a);
    out.view_mut((0, a.ncols()), (b.nrows(), b.ncols()))
        .copy_from(b);
    Ok(out)
}

/// Vertical concatenation `[a; b]`.
pub fn vconcat(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.ncols() != b.ncols() {
        return Err(ZslError::Shape(format!(
            "vconcat column mismatch: {} vs {}",
            a.ncols(),
            b.ncols()
        )));
    }
    let mut out = DMatrix::zeros(a.nrows() + b.nrows(), a.ncols());
    out.view_mut((0, 0), (a.nrows(), a.ncols())).copy_from(a);
    out.view_mut((a.nrows(), 0), (b.nrows(), b.ncols()))
        .copy_from(b);
    Ok(out)
}

/// Column means as a row vector.
pub fn column_means(m: &Matrix) -> RowDVector<f64> {
    m.row_mean()
}

/// Scales every row to unit L2 norm. Zero rows are an error.
pub fn l2_normalize_rows(m: &Matrix) -> Result<Matrix> {
    let mut out = m.clone();
    for (i, mut row) in out.row_iter_mut().enumerate() {
        let n = row.norm();
        if n == 0.0 {
            return Err(ZslError::ZeroNorm(format!("row {i}")));
        }
        row /= n;
    }
    Ok(out)
}

pub fn max_abs(m: &Matrix) -> f64 {
    m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn row_major_layout() {
        let m = from_row_major(2, 3, &[1., 2., 3., 4., 5., 6.]).unwrap();
        assert_eq!(m[(0, 2)], 3.0);
        assert_eq!(m[(1, 0)], 4.0);
        assert_eq!(to_row_major(&m), vec![1., 2., 3., 4., 5., 6.]);
    }

    #[test]
    fn rejects_empty_and_nan() {
        assert!(from_row_major(0, 3, &[]).is_err());
        let err = from_row_major(1, 2, &[1.0, f64::NAN]).unwrap_err();
        assert!(err.to_string().contains("(0, 1)"));
    }

    #[test]
    fn concat_shapes() {
        let a = from_rows(&[vec![1.0], vec![2.0]]).unwrap();
        let b = from_rows(&[vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        let h = hconcat(&a, &b).unwrap();
        assert_eq!(to_rows(&h), vec![vec![1., 3., 4.], vec![2., 5., 6.]]);
        assert!(vconcat(&a, &b).is_err());
    }
}
