//! Full-order periodic FEM: assembly, Newton solves, homogenization.
//!
//! # Discrete forms
//!
//! With trilinear shape functions `N^k` and reference gradients
//! `B^k = dN^k/dX`, the deformation gradient at a Gauss point is
//! `F = Fbar + sum_k u^k (x) B^k` where `u^k` is the nodal fluctuation.
//! The element forms are
//!
//! ```text
//! residual     g^(e,k)_a      = int P_ab B^k_b dV
//! stiffness    K^(e,ka)(e,lc) = int A_abcd B^k_b B^l_d dV
//! sensitivity  L^(e,ke),v=(ab) = int A_abez B^k_z dV
//! ```
//!
//! assembled over the periodic master/slave map (slave contributions
//! accumulate onto their masters, anchored DOFs drop out). The homogenized
//! response follows from
//!
//! ```text
//! Pbar = 1/V sum_e int P dV
//! K S  = L
//! Abar = 1/V sum_e int A^v dV - 1/V L^T S
//! ```
//!
//! so that `Abar = d Pbar / d Fbar` exactly (consistent tangent), which the
//! test suite verifies by central finite differences.
//!
//! Assembly parallelizes over fixed element chunks reduced in chunk order,
//! making results byte-identical at any thread count.

pub(crate) mod assemble;
mod homog;
mod solve;
pub mod sparse;

pub use assemble::{assemble, AssembleParts, Assembled};
pub use homog::{homogenize, homogenize_with, HomogenizedResponse};
pub use solve::{newton_solve, newton_solve_from, FomSolve, IterRecord, NewtonOpts, SolveStatus, Trace};

use nalgebra::{DVector, Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::material::MaterialParams;
use crate::mesh::{build_periodic_map, shape_eval, DofRef, Mesh, PeriodicMap};

/// Wall-clock seconds per pipeline stage, the categories of the runtime
/// breakdown tables.
#[derive(Debug, Clone, Copy, Default, serde::Serialize, serde::Deserialize)]
pub struct Timings {
    pub assembly: f64,
    pub linear_solve: f64,
    pub chart: f64,
    pub projection: f64,
    pub homogenization: f64,
}

impl Timings {
    pub fn total(&self) -> f64 {
        self.assembly + self.linear_solve + self.chart + self.projection + self.homogenization
    }

    pub fn add(&mut self, other: &Timings) {
        self.assembly += other.assembly;
        self.linear_solve += other.linear_solve;
        self.chart += other.chart;
        self.projection += other.projection;
        self.homogenization += other.homogenization;
    }
}

/// Fluctuation vector (free DOFs) plus the macroscopic deformation gradient.
#[derive(Debug, Clone)]
pub struct FullState {
    pub u: DVector<f64>,
    pub fbar: Matrix3<f64>,
}

impl FullState {
    pub fn reference(d: usize) -> Self {
        FullState {
            u: DVector::zeros(d),
            fbar: Matrix3::identity(),
        }
    }
}

/// Per-element precomputed geometry and DOF resolution.
pub(crate) struct ElemGeom {
    /// `grad_x[gp][node]` = dN/dX at the Gauss point.
    pub grad_x: [[Vector3<f64>; 8]; 8],
    /// det(J) * quadrature weight per Gauss point.
    pub detjw: [f64; 8],
    /// Resolved periodic DOF per local slot `3*node + axis`.
    pub dofs: [DofRef; 24],
    pub material: usize,
}

/// Mesh, materials and periodic map bundled with precomputed element tables.
pub struct Rve {
    pub mesh: Mesh,
    pub map: PeriodicMap,
    /// Material parameters indexed by material id.
    pub materials: Vec<MaterialParams>,
    pub(crate) elems: Vec<ElemGeom>,
}

impl Rve {
    pub fn new(mesh: Mesh, materials: Vec<MaterialParams>) -> Result<Self> {
        let map = build_periodic_map(&mesh)?;
        Self::with_map(mesh, map, materials)
    }

    pub fn with_map(mesh: Mesh, map: PeriodicMap, materials: Vec<MaterialParams>) -> Result<Self> {
        for (e, &m) in mesh.element_material.iter().enumerate() {
            if m >= materials.len() {
                return Err(Error::InvalidConfig(format!(
                    "element {e} references material id {m} but only {} materials are defined",
                    materials.len()
                )));
            }
        }

        let mut elems = Vec::with_capacity(mesh.num_elements());
        for e in 0..mesh.num_elements() {
            let mut grad_x = [[Vector3::zeros(); 8]; 8];
            let mut detjw = [0.0; 8];
            for (gp, qp) in mesh.quadrature.iter().enumerate() {
                let (_, local_grads) = shape_eval(&qp.xi);
                let jac = mesh.jacobian(e, &local_grads);
                let det = jac.determinant();
                if det <= 0.0 {
                    return Err(Error::InvalidMesh(format!(
                        "element {e} has nonpositive reference Jacobian {det} at Gauss point {gp}"
                    )));
                }
                let jinv = jac
                    .try_inverse()
                    .ok_or_else(|| Error::Singular(format!("Jacobian of element {e}")))?;
                for k in 0..8 {
                    // dN/dX = J^-T dN/dxi
                    let lg = Vector3::new(
                        local_grads[k][0],
                        local_grads[k][1],
                        local_grads[k][2],
                    );
                    grad_x[gp][k] = jinv.transpose() * lg;
                }
                detjw[gp] = det * qp.weight;
            }
            let conn = mesh.elements[e];
            let mut dofs = [DofRef::Anchored; 24];
            for (k, &node) in conn.iter().enumerate() {
                for axis in 0..3 {
                    dofs[3 * k + axis] = map.dof(node, axis);
                }
            }
            elems.push(ElemGeom {
                grad_x,
                detjw,
                dofs,
                material: mesh.element_material[e],
            });
        }

        Ok(Rve {
            mesh,
            map,
            materials,
            elems,
        })
    }

    /// Number of independent fluctuation DOFs D.
    pub fn n_dofs(&self) -> usize {
        self.map.d
    }

    /// Total nodal displacement `(Fbar - I) X + scatter(u)`, length `3 * num_nodes`.
    pub fn total_displacement(&self, state: &FullState) -> DVector<f64> {
        let mut full = self.map.scatter(&state.u);
        let h = state.fbar - Matrix3::identity();
        for (n, x) in self.mesh.node_coords.iter().enumerate() {
            let affine = h * x;
            for axis in 0..3 {
                full[3 * n + axis] += affine[axis];
            }
        }
        full
    }
}
