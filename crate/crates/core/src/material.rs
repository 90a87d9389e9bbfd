//! Compressible neo-Hookean material law.
//!
//! # Formulation
//!
//! Two variants of the stored energy density are provided (`I_c = tr(F^T F)`,
//! `J = det F`):
//!
//! ```text
//! literal:    W = mu/2 (I_c - 3) + kappa/4 (J^2 - 1 - 2 ln J)
//! stabilized: W = mu/2 (I_c - 3) - mu ln J + kappa/4 (J^2 - 1 - 2 ln J)
//! ```
//!
//! The literal form carries a nonzero reference stress `P(I) = mu I`, which
//! produces spurious fluctuations at `Fbar = I` in a two-phase RVE; the
//! stabilized form with the conventional `-mu ln J` term is stress-free at
//! the reference state and is the default for all experiments. Both remain
//! selectable through [`Variant`].
//!
//! First Piola-Kirchhoff stress and nominal tangent in closed form:
//!
//! ```text
//! P = mu F [- mu F^-T] + kappa/2 (J^2 - 1) F^-T
//! A_ijkl = mu d_ik d_jl
//!        + kappa J^2 Finv_ji Finv_lk
//!        - (kappa/2 (J^2 - 1) [- mu]) Finv_jk Finv_li
//! ```
//!
//! where `Finv = F^-1`, `d` the Kronecker delta, and the bracketed terms
//! apply to the stabilized variant only. `A` has major symmetry exactly.

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Tangent;

/// Energy variant selector; `Stabilized` is the experiment default.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Literal,
    Stabilized,
}

/// Shear and bulk moduli plus the energy variant.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MaterialParams {
    /// Shear modulus (N/mm^2).
    pub mu: f64,
    /// Bulk-like modulus multiplying the volumetric term (N/mm^2).
    pub kappa: f64,
    pub variant: Variant,
}

/// Stress and tangent evaluated at one deformation gradient.
#[derive(Clone, Copy)]
pub struct StressTangent {
    pub p: Matrix3<f64>,
    pub a: Tangent,
}

/// Converts engineering constants to the model's moduli:
/// `mu = E / (2 (1 + nu))`, `kappa = E / (3 (1 - 2 nu))`.
pub fn moduli_from_e_nu(e: f64, nu: f64, variant: Variant) -> Result<MaterialParams> {
    if !(e > 0.0) {
        return Err(Error::InvalidMaterial(format!(
            "Young's modulus must be positive, got {e}"
        )));
    }
    if nu >= 0.5 {
        return Err(Error::IncompressibleLimit { nu });
    }
    if nu <= 0.0 {
        return Err(Error::InvalidMaterial(format!(
            "Poisson ratio must lie in (0, 0.5), got {nu}"
        )));
    }
    Ok(MaterialParams {
        mu: e / (2.0 * (1.0 + nu)),
        kappa: e / (3.0 * (1.0 - 2.0 * nu)),
        variant,
    })
}

#[inline]
fn checked_det(f: &Matrix3<f64>) -> Result<f64> {
    let j = f.determinant();
    if j <= 0.0 {
        // Element/Gauss context is attached by the assembly loop.
        return Err(Error::InvertedElement {
            element: usize::MAX,
            gauss: usize::MAX,
            det_f: j,
        });
    }
    Ok(j)
}

/// Stored energy density `W(F)`.
pub fn energy(params: &MaterialParams, f: &Matrix3<f64>) -> Result<f64> {
    let j = checked_det(f)?;
    let ic = f.norm_squared();
    let vol = 0.25 * params.kappa * (j * j - 1.0 - 2.0 * j.ln());
    let mut w = 0.5 * params.mu * (ic - 3.0) + vol;
    if params.variant == Variant::Stabilized {
        w -= params.mu * j.ln();
    }
    Ok(w)
}

/// First Piola-Kirchhoff stress only (cheap path for residual assembly).
pub fn stress(params: &MaterialParams, f: &Matrix3<f64>) -> Result<Matrix3<f64>> {
    let j = checked_det(f)?;
    let finv = f
        .try_inverse()
        .ok_or_else(|| Error::Singular("deformation gradient not invertible".into()))?;
    let mut coeff = 0.5 * params.kappa * (j * j - 1.0);
    if params.variant == Variant::Stabilized {
        coeff -= params.mu;
    }
    Ok(params.mu * f + coeff * finv.transpose())
}

/// Stress and closed-form nominal tangent `A = dP/dF`.
pub fn stress_tangent(params: &MaterialParams, f: &Matrix3<f64>) -> Result<StressTangent> {
    let j = checked_det(f)?;
    let finv = f
        .try_inverse()
        .ok_or_else(|| Error::Singular("deformation gradient not invertible".into()))?;

    let mut c_vol = 0.5 * params.kappa * (j * j - 1.0);
    if params.variant == Variant::Stabilized {
        c_vol -= params.mu;
    }
    let p = params.mu * f + c_vol * finv.transpose();

    let c_jj = params.kappa * j * j;
    let mu = params.mu;
    let mut a = Tangent::zero();
    for i in 0..3 {
        for jj in 0..3 {
            // F^-T_(i jj) = Finv_(jj i)
            let ftinv_ij = finv[(jj, i)];
            for k in 0..3 {
                let finv_jk = finv[(jj, k)];
                for l in 0..3 {
                    let mut v = c_jj * ftinv_ij * finv[(l, k)] - c_vol * finv_jk * finv[(l, i)];
                    if i == k && jj == l {
                        v += mu;
                    }
                    a.set(i, jj, k, l, v);
                }
            }
        }
    }
    Ok(StressTangent { p, a })
}
