//! Greedy magic-point selection on residual POD modes.
//!
//! The first magic point is the entry of largest magnitude of the first
//! residual mode. Each further mode `omega_j` is first deflated by the part
//! that the existing points already predict,
//!
//! ```text
//! (Z^T Omega_prev) y = Z^T omega_j,    omega_j_defl = omega_j - Omega_prev y,
//! ```
//!
//! and the next point is the entry of largest magnitude of the deflated
//! mode. The deflated mode vanishes at all previously selected rows, so the
//! selection never repeats an index while the modes remain independent.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::fem::Rve;
use crate::galerkin::ResidualSet;
use crate::mesh::DofRef;
use crate::reduce::pod_fit;

/// Selected magic DOFs with their reduced integration domain.
#[derive(Debug, Clone)]
pub struct MagicPoints {
    /// Magic DOF ids in selection order.
    pub indices: Vec<usize>,
    /// Elements touching any magic DOF (sorted).
    pub elements: Vec<usize>,
    /// Free DOFs of all nodes of those elements (sorted); every magic DOF
    /// is a member.
    pub dofs: Vec<usize>,
    /// Position of each free DOF inside `dofs`, for O(1) scatter lookups.
    pub(crate) im_pos: Vec<Option<u32>>,
    /// Position of each free DOF inside `indices`.
    pub(crate) magic_pos: Vec<Option<u32>>,
}

impl MagicPoints {
    pub fn m(&self) -> usize {
        self.indices.len()
    }

    /// Gathers the `dofs` rows of a full-height matrix.
    pub fn restrict_rows(&self, full: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.dofs.len(), full.ncols());
        for (r, &dof) in self.dofs.iter().enumerate() {
            out.set_row(r, &full.row(dof));
        }
        out
    }

    /// Gathers the magic rows of a full-height matrix (the action of Z^T).
    pub fn restrict_magic_rows(&self, full: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.indices.len(), full.ncols());
        for (r, &dof) in self.indices.iter().enumerate() {
            out.set_row(r, &full.row(dof));
        }
        out
    }
}

/// Greedy selection of `m` magic indices from residual modes.
///
/// Returns the selected row indices and the `D x m` mode matrix `Omega`.
pub fn select_magic_indices(g: &DMatrix<f64>, m: usize) -> Result<(Vec<usize>, DMatrix<f64>)> {
    let d_full = g.nrows();
    if m == 0 || m > d_full.min(g.ncols()) {
        return Err(Error::InvalidConfig(format!(
            "magic point count m = {m} outside 1..=min(D, s_g) = {}",
            d_full.min(g.ncols())
        )));
    }
    let pod = pod_fit(g, m)?;
    if m > pod.rank {
        return Err(Error::InsufficientRank(format!(
            "m = {m} magic points requested but residual snapshots have rank {}",
            pod.rank
        )));
    }
    let omega = pod.psi;

    let mut indices: Vec<usize> = Vec::with_capacity(m);
    indices.push(argmax_abs(&omega.column(0).into_owned()));

    for j in 1..m {
        // Activity of the previous modes at the selected rows.
        let k = indices.len();
        let mut zt_omega = DMatrix::zeros(k, k);
        let mut zt_wj = DVector::zeros(k);
        for (r, &idx) in indices.iter().enumerate() {
            for c in 0..k {
                zt_omega[(r, c)] = omega[(idx, c)];
            }
            zt_wj[r] = omega[(idx, j)];
        }
        let y = zt_omega.lu().solve(&zt_wj).ok_or_else(|| {
            Error::Singular(format!(
                "magic-point system Z^T Omega singular at mode {j}"
            ))
        })?;

        let mut deflated = omega.column(j).into_owned();
        for c in 0..k {
            deflated -= y[c] * omega.column(c);
        }
        let next = argmax_abs(&deflated);
        if indices.contains(&next) {
            return Err(Error::Singular(format!(
                "magic-point selection repeated index {next} at mode {j}"
            )));
        }
        indices.push(next);
    }

    Ok((indices, omega))
}

/// Builds the reduced integration domain closure for given magic DOFs.
pub fn magic_points(rve: &Rve, indices: Vec<usize>) -> MagicPoints {
    let n_free = rve.n_dofs();
    let mut is_magic = vec![false; n_free];
    for &i in &indices {
        is_magic[i] = true;
    }

    let mut elements = Vec::new();
    let mut in_im = vec![false; n_free];
    for (e, geom) in rve.elems.iter().enumerate() {
        let touches = geom
            .dofs
            .iter()
            .any(|d| matches!(d, DofRef::Free(i) if is_magic[*i]));
        if touches {
            elements.push(e);
            for d in &geom.dofs {
                if let DofRef::Free(i) = d {
                    in_im[*i] = true;
                }
            }
        }
    }

    let dofs: Vec<usize> = (0..n_free).filter(|&i| in_im[i]).collect();
    let mut im_pos = vec![None; n_free];
    for (pos, &dof) in dofs.iter().enumerate() {
        im_pos[dof] = Some(pos as u32);
    }
    let mut magic_pos = vec![None; n_free];
    for (pos, &dof) in indices.iter().enumerate() {
        magic_pos[dof] = Some(pos as u32);
    }

    MagicPoints {
        indices,
        elements,
        dofs,
        im_pos,
        magic_pos,
    }
}

/// Selects `m` magic points from recorded residual snapshots and closes
/// the reduced integration domain. Returns the points and the mode matrix.
pub fn select_magic_points(
    rve: &Rve,
    residuals: &ResidualSet,
    m: usize,
) -> Result<(MagicPoints, DMatrix<f64>)> {
    let (indices, omega) = select_magic_indices(&residuals.g, m)?;
    Ok((magic_points(rve, indices), omega))
}

fn argmax_abs(v: &DVector<f64>) -> usize {
    let mut best = 0;
    let mut bv = -1.0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > bv {
            bv = x.abs();
            best = i;
        }
    }
    best
}
