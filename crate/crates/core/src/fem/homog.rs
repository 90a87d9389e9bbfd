//! First-order homogenization with consistent tangent.

use nalgebra::{DMatrix, Matrix3, SMatrix};

use crate::error::Result;

use super::sparse::Factor;
use super::{assemble, AssembleParts, Assembled, FullState, Rve};

/// Volume-averaged stress, consistent tangent and fluctuation sensitivity.
#[derive(Debug, Clone)]
pub struct HomogenizedResponse {
    pub pbar: Matrix3<f64>,
    /// Consistent tangent d Pbar / d Fbar in Voigt ordering.
    pub abar: SMatrix<f64, 9, 9>,
    /// Sensitivity S solving K S = L (D x 9), or its reduced analogue.
    pub svec: DMatrix<f64>,
}

/// Homogenizes a converged state, assembling K and L internally.
pub fn homogenize(rve: &Rve, state: &FullState) -> Result<HomogenizedResponse> {
    let asm = assemble(rve, state, AssembleParts::homogenization())?;
    homogenize_with(rve, &asm)
}

/// Homogenizes from an existing assembly carrying stiffness, sensitivity
/// and volume averages. One factorization serves all nine right-hand sides.
pub fn homogenize_with(rve: &Rve, asm: &Assembled) -> Result<HomogenizedResponse> {
    let v = rve.mesh.volume;
    let k = asm.k.as_ref().expect("stiffness assembled");
    let l = asm.l.as_ref().expect("sensitivity assembled");
    let p_vol = asm.p_vol.expect("volume averages assembled");
    let a_vol = asm.a_vol.expect("volume averages assembled");

    let factor = Factor::new(k)?;
    let svec = factor.solve_mat(l)?;

    let pbar = p_vol / v;
    let mut abar = a_vol / v;
    let correction = l.transpose() * &svec / v;
    for i in 0..9 {
        for j in 0..9 {
            abar[(i, j)] -= correction[(i, j)];
        }
    }

    Ok(HomogenizedResponse { pbar, abar, svec })
}
