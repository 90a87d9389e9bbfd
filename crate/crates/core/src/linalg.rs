//! Shared dense linear-algebra conventions and small helpers.
//!
//! # Voigt convention
//!
//! Every 9-column object (sensitivity L, homogenized tangent, stacked
//! stress snapshots) uses one fixed component ordering for the unsymmetric
//! 3x3 tensors of finite-strain mechanics:
//!
//! ```text
//! index:     0   1   2   3   4   5   6   7   8
//! component: 11  22  33  12  13  23  21  31  32
//! ```
//!
//! The ordering is load-bearing for bit-exact files and is asserted by the
//! store round-trip tests; change it nowhere.

use nalgebra::{DMatrix, DVector, Matrix3, SMatrix};

/// Index pairs of the fixed Voigt ordering, 0-based.
pub const VOIGT9: [(usize, usize); 9] = [
    (0, 0),
    (1, 1),
    (2, 2),
    (0, 1),
    (0, 2),
    (1, 2),
    (1, 0),
    (2, 0),
    (2, 1),
];

/// Position of component (i, j) in the fixed Voigt ordering.
#[inline]
pub fn voigt_index(i: usize, j: usize) -> usize {
    const LUT: [[usize; 3]; 3] = [[0, 3, 4], [6, 1, 5], [7, 8, 2]];
    LUT[i][j]
}

/// Flattens a 3x3 tensor into the fixed Voigt ordering.
pub fn to_voigt(m: &Matrix3<f64>) -> [f64; 9] {
    let mut v = [0.0; 9];
    for (p, &(i, j)) in VOIGT9.iter().enumerate() {
        v[p] = m[(i, j)];
    }
    v
}

/// Inverse of [`to_voigt`].
pub fn from_voigt(v: &[f64]) -> Matrix3<f64> {
    let mut m = Matrix3::zeros();
    for (p, &(i, j)) in VOIGT9.iter().enumerate() {
        m[(i, j)] = v[p];
    }
    m
}

/// Fourth-order nominal tangent A_ijkl stored flat as i*27 + j*9 + k*3 + l.
#[derive(Clone, Copy)]
pub struct Tangent(pub [f64; 81]);

impl Tangent {
    #[inline]
    pub fn zero() -> Self {
        Tangent([0.0; 81])
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize, l: usize) -> f64 {
        self.0[i * 27 + j * 9 + k * 3 + l]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, l: usize, v: f64) {
        self.0[i * 27 + j * 9 + k * 3 + l] = v;
    }

    /// 9x9 Voigt matrix A_v[p][q] = A_ijkl with (i,j) = VOIGT9[p], (k,l) = VOIGT9[q].
    pub fn to_voigt(&self) -> SMatrix<f64, 9, 9> {
        let mut m = SMatrix::<f64, 9, 9>::zeros();
        for (p, &(i, j)) in VOIGT9.iter().enumerate() {
            for (q, &(k, l)) in VOIGT9.iter().enumerate() {
                m[(p, q)] = self.get(i, j, k, l);
            }
        }
        m
    }

    /// Maximum deviation from major symmetry A_ijkl = A_klij.
    pub fn major_asymmetry(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                for k in 0..3 {
                    for l in 0..3 {
                        worst = worst.max((self.get(i, j, k, l) - self.get(k, l, i, j)).abs());
                    }
                }
            }
        }
        worst
    }
}

/// Minimum-norm least-squares solution of `a x = b` via SVD.
///
/// Singular values below `rcond * sigma_max` are treated as zero, so
/// rank-deficient systems yield the minimum-norm solution.
pub fn lstsq(a: &DMatrix<f64>, b: &DMatrix<f64>, rcond: f64) -> DMatrix<f64> {
    let svd = a.clone().svd(true, true);
    let eps = rcond * svd.singular_values.max().max(f64::MIN_POSITIVE);
    svd.solve(b, eps).expect("SVD solve with computed factors")
}

/// Vector right-hand-side variant of [`lstsq`].
pub fn lstsq_vec(a: &DMatrix<f64>, b: &DVector<f64>, rcond: f64) -> DVector<f64> {
    let b_mat = DMatrix::from_column_slice(b.len(), 1, b.as_slice());
    DVector::from_column_slice(lstsq(a, &b_mat, rcond).as_slice())
}

/// Relative Frobenius distance ||a - b|| / max(||b||, floor).
pub fn rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1e-300)
}
