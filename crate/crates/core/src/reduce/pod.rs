//! Proper orthogonal decomposition.
//!
//! The POD basis of rank d is the matrix of left singular vectors of the
//! snapshot matrix U belonging to the d largest singular values. It minimizes
//! the squared reconstruction error over all rank-d orthonormal bases, and
//! the minimum equals the sum of the squared discarded singular values:
//!
//! ```text
//! sum_i || u_i - psi psi^T u_i ||^2 = sum_{j > d} sigma_j^2
//! ```

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Left singular vectors and the full singular value spectrum.
#[derive(Debug, Clone)]
pub struct PodBasis {
    /// D x d orthonormal basis, modes ordered by decreasing singular value.
    pub psi: DMatrix<f64>,
    /// All singular values, descending.
    pub singular_values: Vec<f64>,
    /// Numerical rank of the snapshot matrix at the retention threshold.
    /// When rank < d the trailing d - rank columns of `psi` are orthonormal
    /// but not data-supported; callers may truncate to `rank`.
    pub rank: usize,
}

/// Computes the rank-d POD basis of a D x s snapshot matrix.
pub fn pod_fit(u: &DMatrix<f64>, d: usize) -> Result<PodBasis> {
    let (nrows, ncols) = u.shape();
    if d == 0 || d > nrows.min(ncols) {
        return Err(Error::InvalidConfig(format!(
            "POD dimension d = {d} outside 1..=min({nrows}, {ncols})"
        )));
    }
    let svd = u.clone().svd(true, false);
    let sv: Vec<f64> = svd.singular_values.iter().copied().collect();
    let u_left = svd
        .u
        .ok_or_else(|| Error::Singular("SVD did not return left singular vectors".into()))?;
    let smax = sv.first().copied().unwrap_or(0.0);
    let tol = smax * f64::EPSILON * nrows.max(ncols) as f64;
    let rank = sv.iter().filter(|&&s| s > tol).count();
    Ok(PodBasis {
        psi: u_left.columns(0, d).into_owned(),
        singular_values: sv,
        rank,
    })
}

impl PodBasis {
    /// Squared reconstruction error of the retained basis on a matrix whose
    /// SVD produced this spectrum, i.e. the discarded tail energy.
    pub fn tail_energy(&self, d: usize) -> f64 {
        self.singular_values.iter().skip(d).map(|s| s * s).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn random_matrix(r: &mut impl Rng, nrows: usize, ncols: usize) -> DMatrix<f64> {
        DMatrix::from_fn(nrows, ncols, |_, _| r.random::<f64>() * 2.0 - 1.0)
    }

    #[test]
    fn rank_two_snapshots_reproduced_exactly() {
        let mut r = ChaCha12Rng::seed_from_u64(7);
        let a = DVector::from_fn(40, |i, _| (i as f64 * 0.3).sin());
        let b = DVector::from_fn(40, |i, _| (i as f64 * 0.11).cos());
        let mut u = DMatrix::zeros(40, 12);
        for j in 0..12 {
            let (ca, cb) = (r.random::<f64>() * 2.0 - 1.0, r.random::<f64>() * 2.0 - 1.0);
            u.set_column(j, &(&a * ca + &b * cb));
        }
        let basis = pod_fit(&u, 2).unwrap();
        let recon = &basis.psi * (basis.psi.transpose() * &u);
        assert!((recon - &u).norm() < 1e-12 * u.norm());
        assert_eq!(basis.rank, 2);
    }

    #[test]
    fn basis_is_orthonormal() {
        let mut r = ChaCha12Rng::seed_from_u64(8);
        let u = random_matrix(&mut r, 30, 10);
        let basis = pod_fit(&u, 6).unwrap();
        let gram = basis.psi.transpose() * &basis.psi;
        let eye = DMatrix::<f64>::identity(6, 6);
        assert!((gram - eye).norm() < 1e-12);
    }

    #[test]
    fn reconstruction_error_matches_singular_value_tail() {
        let mut r = ChaCha12Rng::seed_from_u64(9);
        let u = random_matrix(&mut r, 25, 18);
        for d in [1usize, 4, 9, 15] {
            let basis = pod_fit(&u, d).unwrap();
            let recon = &basis.psi * (basis.psi.transpose() * &u);
            let err2 = (recon - &u).norm_squared();
            let tail: f64 = basis.singular_values.iter().skip(d).map(|s| s * s).sum();
            assert!(
                (err2 - tail).abs() <= 1e-10 * (1.0 + tail),
                "d = {d}: err2 = {err2}, tail = {tail}"
            );
        }
    }

    #[test]
    fn singular_values_descending() {
        let mut r = ChaCha12Rng::seed_from_u64(10);
        let u = random_matrix(&mut r, 20, 20);
        let basis = pod_fit(&u, 5).unwrap();
        for w in basis.singular_values.windows(2) {
            assert!(w[0] >= w[1]);
        }
    }

    #[test]
    fn flags_rank_deficiency_instead_of_failing() {
        let a = DVector::from_fn(10, |i, _| i as f64 + 1.0);
        let mut u = DMatrix::zeros(10, 5);
        for j in 0..5 {
            u.set_column(j, &(&a * (j as f64 + 1.0)));
        }
        let basis = pod_fit(&u, 3).unwrap();
        assert_eq!(basis.rank, 1);
        // Trailing columns are still orthonormal, so the caller can truncate.
        let gram = basis.psi.transpose() * &basis.psi;
        assert!((gram - DMatrix::<f64>::identity(3, 3)).norm() < 1e-12);
        let recon = basis.psi.column(0) * (basis.psi.column(0).transpose() * &u);
        assert!((recon - &u).norm() < 1e-12 * u.norm());
    }

    #[test]
    fn rejects_out_of_range_dimension() {
        let u = DMatrix::<f64>::identity(6, 4);
        assert!(pod_fit(&u, 0).is_err());
        assert!(pod_fit(&u, 5).is_err());
    }
}
