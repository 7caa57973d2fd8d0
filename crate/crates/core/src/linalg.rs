//! Dense factorizations that the tensor kernels do not provide.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn to_matrix(t: &Tensor) -> Result<DMatrix<f64>> {
    let (r, c) = t.dims2()?;
    Ok(DMatrix::from_row_slice(r, c, t.data()))
}

pub fn from_matrix(m: &DMatrix<f64>) -> Result<Tensor> {
    let data = (0..m.nrows()).flat_map(|i| m.row(i).iter().copied().collect::<Vec<_>>()).collect();
    Tensor::matrix(m.nrows(), m.ncols(), data)
}

/// Moore-Penrose pseudo-inverse via SVD.
pub fn pinv(t: &Tensor) -> Result<Tensor> {
    let m = to_matrix(t)?;
    let inv = m.pseudo_inverse(1e-12).map_err(|e| Error::DegenerateData(format!("pseudo-inverse failed: {e}")))?;
    from_matrix(&inv)
}

/// Orthonormal basis `[F, r]` for the column span of `cols` (`[F, m]`).
/// Columns whose residual norm falls below `1e-10` are dropped.
pub fn column_basis(cols: &Tensor) -> Result<Tensor> {
    let (f, m) = cols.dims2()?;
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(m);
    for j in 0..m {
        let mut v: Vec<f64> = (0..f).map(|i| cols.at(i, j)).collect();
        let scale = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        for _ in 0..2 {
            for b in &basis {
                let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-10 * scale.max(1.0) {
            basis.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    if basis.is_empty() {
        return Err(Error::DegenerateData("column span is empty".into()));
    }
    Tensor::from_rows(&basis)?.transpose()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pinv_of_tall_full_rank_is_left_inverse() {
        let a = Tensor::matrix(3, 2, vec![1.0, 2.0, 0.0, 1.0, 3.0, -1.0]).unwrap();
        let p = pinv(&a).unwrap();
        let id = p.matmul(&a).unwrap();
        assert!(id.max_abs_diff(&Tensor::eye(2)) < 1e-12);
    }

    #[test]
    fn basis_drops_dependent_columns() {
        let a = Tensor::matrix(3, 3, vec![1.0, 2.0, 0.0, 0.0, 0.0, 1.0, 1.0, 2.0, 0.0]).unwrap();
        let q = column_basis(&a).unwrap();
        assert_eq!(q.shape(), &[3, 2]);
        let g = q.transpose().unwrap().matmul(&q).unwrap();
        assert!(g.max_abs_diff(&Tensor::eye(2)) < 1e-12);
    }
}
