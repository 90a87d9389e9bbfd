//! Sparse symmetric direct solver wrapper (LDL^T with RCM ordering).

use nalgebra::{DMatrix, DVector};
use sprs::CsMat;
use sprs_ldl::{Ldl, LdlNumeric};

use crate::error::{Error, Result};

/// Factorized symmetric system, reusable across many right-hand sides.
pub struct Factor {
    ldl: LdlNumeric<f64, usize>,
    n: usize,
}

impl Factor {
    /// Factorizes a symmetric matrix given in full (both triangles) CSC storage.
    pub fn new(k: &CsMat<f64>) -> Result<Self> {
        let n = k.rows();
        let ldl = Ldl::new()
            .check_symmetry(sprs::SymmetryCheck::DontCheckSymmetry)
            .fill_in_reduction(sprs::FillInReduction::ReverseCuthillMcKee)
            .numeric(k.view())
            .map_err(|e| Error::Singular(format!("LDL^T factorization failed: {e}")))?;
        Ok(Factor { ldl, n })
    }

    pub fn solve_vec(&self, rhs: &DVector<f64>) -> Result<DVector<f64>> {
        assert_eq!(rhs.len(), self.n);
        let x: Vec<f64> = self.ldl.solve(rhs.as_slice());
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Singular(
                "non-finite solution from LDL^T solve (singular stiffness)".into(),
            ));
        }
        Ok(DVector::from_vec(x))
    }

    /// Solves one system per column of `rhs`.
    pub fn solve_mat(&self, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let mut out = DMatrix::zeros(rhs.nrows(), rhs.ncols());
        for c in 0..rhs.ncols() {
            let col = DVector::from_column_slice(rhs.column(c).as_slice());
            out.set_column(c, &self.solve_vec(&col)?);
        }
        Ok(out)
    }
}

/// Dense product `K * m` for a CSC matrix, single pass over the nonzeros.
pub fn mul_dense(k: &CsMat<f64>, m: &DMatrix<f64>) -> DMatrix<f64> {
    assert_eq!(k.cols(), m.nrows());
    let mut out = DMatrix::zeros(k.rows(), m.ncols());
    for (c, col) in k.outer_iterator().enumerate() {
        for (r, &v) in col.iter() {
            for j in 0..m.ncols() {
                out[(r, j)] += v * m[(c, j)];
            }
        }
    }
    out
}

/// Dense copy, intended for small test systems only.
pub fn to_dmatrix(k: &CsMat<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(k.rows(), k.cols());
    for (c, col) in k.outer_iterator().enumerate() {
        for (r, &v) in col.iter() {
            out[(r, c)] += v;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use sprs::TriMat;

    #[test]
    fn solves_small_spd_system() {
        let mut tri = TriMat::new((3, 3));
        tri.add_triplet(0, 0, 4.0);
        tri.add_triplet(1, 1, 5.0);
        tri.add_triplet(2, 2, 6.0);
        tri.add_triplet(0, 1, 1.0);
        tri.add_triplet(1, 0, 1.0);
        tri.add_triplet(1, 2, 2.0);
        tri.add_triplet(2, 1, 2.0);
        let k: CsMat<f64> = tri.to_csc();
        let f = Factor::new(&k).unwrap();
        let x = f.solve_vec(&DVector::from_vec(vec![1.0, 2.0, 3.0])).unwrap();
        let rhs = DMatrix::from_column_slice(3, 1, &[1.0, 2.0, 3.0]);
        let x_mat = DMatrix::from_column_slice(3, 1, x.as_slice());
        assert!((mul_dense(&k, &x_mat) - rhs).norm() < 1e-12);
    }
}
