//! Parallel periodic assembly of residual, stiffness, sensitivity and
//! volume-averaged stress/tangent integrals.

use nalgebra::{DMatrix, DVector, Matrix3, SMatrix};
use rayon::prelude::*;
use sprs::{CsMat, TriMat};

use crate::error::{Error, Result};
use crate::linalg::VOIGT9;
use crate::material::{stress_tangent, StressTangent};
use crate::mesh::DofRef;

use super::{FullState, Rve};

/// Which optional outputs an assembly pass should produce; the residual is
/// always assembled.
#[derive(Debug, Clone, Copy, Default)]
pub struct AssembleParts {
    pub stiffness: bool,
    pub sensitivity: bool,
    /// Volume integrals of P and A^v for homogenization.
    pub volume_averages: bool,
}

impl AssembleParts {
    pub fn residual_only() -> Self {
        AssembleParts::default()
    }

    pub fn newton() -> Self {
        AssembleParts {
            stiffness: true,
            ..Default::default()
        }
    }

    pub fn homogenization() -> Self {
        AssembleParts {
            stiffness: true,
            sensitivity: true,
            volume_averages: true,
        }
    }
}

/// Assembled periodic system on the free DOFs.
pub struct Assembled {
    pub g: DVector<f64>,
    pub k: Option<CsMat<f64>>,
    pub l: Option<DMatrix<f64>>,
    /// `sum_e int P dV` (not volume-normalized).
    pub p_vol: Option<Matrix3<f64>>,
    /// `sum_e int A^v dV` in Voigt ordering (not volume-normalized).
    pub a_vol: Option<SMatrix<f64, 9, 9>>,
}

/// Fixed chunk size for the deterministic parallel reduction.
const CHUNK: usize = 32;

struct ChunkOut {
    g: DVector<f64>,
    trips: Vec<(usize, usize, f64)>,
    l: Option<DMatrix<f64>>,
    p_vol: Matrix3<f64>,
    a_vol: SMatrix<f64, 9, 9>,
}

/// Element kernel output scattered by the caller.
pub(crate) struct ElemOut {
    pub ge: [f64; 24],
    pub ke: Option<[[f64; 24]; 24]>,
    pub le: Option<[[f64; 9]; 24]>,
    pub p_vol: Matrix3<f64>,
    pub a_vol: SMatrix<f64, 9, 9>,
}

/// Evaluates the element integrals of element `e` at the given state.
pub(crate) fn element_kernel(
    rve: &Rve,
    e: usize,
    u: &DVector<f64>,
    fbar: &Matrix3<f64>,
    parts: AssembleParts,
) -> Result<ElemOut> {
    let geom = &rve.elems[e];
    let mat = &rve.materials[geom.material];

    let mut u_e = [[0.0f64; 3]; 8];
    for k in 0..8 {
        for a in 0..3 {
            if let DofRef::Free(idx) = geom.dofs[3 * k + a] {
                u_e[k][a] = u[idx];
            }
        }
    }

    let mut ge = [0.0f64; 24];
    let mut ke = parts.stiffness.then(|| [[0.0f64; 24]; 24]);
    let mut le = parts.sensitivity.then(|| [[0.0f64; 9]; 24]);
    let mut p_vol = Matrix3::zeros();
    let mut a_vol = SMatrix::<f64, 9, 9>::zeros();

    for gp in 0..8 {
        let grads = &geom.grad_x[gp];
        let w = geom.detjw[gp];

        let mut f = *fbar;
        for k in 0..8 {
            let b = grads[k];
            for a in 0..3 {
                let ua = u_e[k][a];
                f[(a, 0)] += ua * b.x;
                f[(a, 1)] += ua * b.y;
                f[(a, 2)] += ua * b.z;
            }
        }

        let StressTangent { p, a } = stress_tangent(mat, &f).map_err(|err| match err {
            Error::InvertedElement { det_f, .. } => Error::InvertedElement {
                element: e,
                gauss: gp,
                det_f,
            },
            other => other,
        })?;

        for k in 0..8 {
            let b = grads[k];
            for alpha in 0..3 {
                ge[3 * k + alpha] +=
                    w * (p[(alpha, 0)] * b.x + p[(alpha, 1)] * b.y + p[(alpha, 2)] * b.z);
            }
        }

        if let Some(ke) = ke.as_mut() {
            // c[k][alpha][gamma][delta] = sum_beta A_(alpha beta gamma delta) B^k_beta
            let mut c = [[[[0.0f64; 3]; 3]; 3]; 8];
            for k in 0..8 {
                let b = grads[k];
                for alpha in 0..3 {
                    for gamma in 0..3 {
                        for delta in 0..3 {
                            c[k][alpha][gamma][delta] = a.get(alpha, 0, gamma, delta) * b.x
                                + a.get(alpha, 1, gamma, delta) * b.y
                                + a.get(alpha, 2, gamma, delta) * b.z;
                        }
                    }
                }
            }
            // K^(ka)(lc) = w * sum_delta c[k][a][c][delta] B^l_delta; symmetric
            // under (ka) <-> (lc) by major symmetry of A, so mirror l > k.
            for k in 0..8 {
                for l in k..8 {
                    let bl = grads[l];
                    for alpha in 0..3 {
                        let ck = &c[k][alpha];
                        for gamma in 0..3 {
                            let v = w
                                * (ck[gamma][0] * bl.x + ck[gamma][1] * bl.y + ck[gamma][2] * bl.z);
                            ke[3 * k + alpha][3 * l + gamma] += v;
                            if l > k {
                                ke[3 * l + gamma][3 * k + alpha] += v;
                            }
                        }
                    }
                }
            }
        }

        if let Some(le) = le.as_mut() {
            for k in 0..8 {
                let b = grads[k];
                for (v, &(alpha, beta)) in VOIGT9.iter().enumerate() {
                    for eps in 0..3 {
                        le[3 * k + eps][v] += w
                            * (a.get(alpha, beta, eps, 0) * b.x
                                + a.get(alpha, beta, eps, 1) * b.y
                                + a.get(alpha, beta, eps, 2) * b.z);
                    }
                }
            }
        }

        if parts.volume_averages {
            p_vol += w * p;
            for (vp, &(i, j)) in VOIGT9.iter().enumerate() {
                for (vq, &(k, l)) in VOIGT9.iter().enumerate() {
                    a_vol[(vp, vq)] += w * a.get(i, j, k, l);
                }
            }
        }
    }

    Ok(ElemOut {
        ge,
        ke,
        le,
        p_vol,
        a_vol,
    })
}

fn assemble_chunk(
    rve: &Rve,
    elems: std::ops::Range<usize>,
    state: &FullState,
    parts: AssembleParts,
) -> Result<ChunkOut> {
    let d = rve.n_dofs();
    let mut g = DVector::zeros(d);
    let mut trips = Vec::new();
    if parts.stiffness {
        trips.reserve(elems.len() * 24 * 24);
    }
    let mut l = parts.sensitivity.then(|| DMatrix::zeros(d, 9));
    let mut p_vol = Matrix3::zeros();
    let mut a_vol = SMatrix::<f64, 9, 9>::zeros();

    for e in elems {
        let out = element_kernel(rve, e, &state.u, &state.fbar, parts)?;
        let dofs = &rve.elems[e].dofs;

        for i in 0..24 {
            let DofRef::Free(gi) = dofs[i] else { continue };
            g[gi] += out.ge[i];
            if let Some(ke) = &out.ke {
                for j in 0..24 {
                    if let DofRef::Free(gj) = dofs[j] {
                        trips.push((gi, gj, ke[i][j]));
                    }
                }
            }
            if let (Some(l), Some(le)) = (l.as_mut(), &out.le) {
                for v in 0..9 {
                    l[(gi, v)] += le[i][v];
                }
            }
        }
        p_vol += out.p_vol;
        a_vol += out.a_vol;
    }

    Ok(ChunkOut {
        g,
        trips,
        l,
        p_vol,
        a_vol,
    })
}

/// Assembles the periodic system at `state` over all elements.
///
/// Elements are processed in fixed chunks of [`CHUNK`]; chunk results merge
/// in chunk order, so the output is independent of the number of threads.
pub fn assemble(rve: &Rve, state: &FullState, parts: AssembleParts) -> Result<Assembled> {
    let d = rve.n_dofs();
    assert_eq!(state.u.len(), d, "fluctuation vector length");
    let ne = rve.mesh.num_elements();
    let n_chunks = ne.div_ceil(CHUNK);

    let chunk_results: Vec<Result<ChunkOut>> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let lo = c * CHUNK;
            let hi = (lo + CHUNK).min(ne);
            assemble_chunk(rve, lo..hi, state, parts)
        })
        .collect();

    let mut g = DVector::zeros(d);
    let mut tri = parts.stiffness.then(|| TriMat::new((d, d)));
    let mut l = parts.sensitivity.then(|| DMatrix::zeros(d, 9));
    let mut p_vol = Matrix3::zeros();
    let mut a_vol = SMatrix::<f64, 9, 9>::zeros();

    for chunk in chunk_results {
        let chunk = chunk?;
        g += &chunk.g;
        if let Some(tri) = tri.as_mut() {
            for (r, c, v) in chunk.trips {
                tri.add_triplet(r, c, v);
            }
        }
        if let (Some(l), Some(cl)) = (l.as_mut(), chunk.l) {
            *l += cl;
        }
        p_vol += chunk.p_vol;
        a_vol += chunk.a_vol;
    }

    Ok(Assembled {
        g,
        k: tri.map(|t| t.to_csc()),
        l,
        p_vol: parts.volume_averages.then_some(p_vol),
        a_vol: parts.volume_averages.then_some(a_vol),
    })
}
