//! Restricted assembly over the reduced integration domain.
//!
//! Only elements in `E_m` are visited. Each element contributes its magic
//! rows of the residual and sensitivity and, for the stiffness, the
//! element-level product with the restricted basis rows,
//!
//! ```text
//! (K phibar)_hat[j, :] += sum_h k_e[j_loc, h] phibar[dof(h), :],
//! ```
//!
//! so the full sparse stiffness never exists online. Volume integrals are
//! accumulated with the fitted element weights `xi` in the same pass.

use nalgebra::{DMatrix, DVector, Matrix3, SMatrix};

use crate::error::{Error, Result};
use crate::fem::assemble::{element_kernel, AssembleParts};
use crate::fem::{FullState, Rve};
use crate::linalg::VOIGT9;
use crate::mesh::DofRef;

use super::MagicPoints;

/// Which restricted outputs to assemble; `g_m` is always produced.
#[derive(Debug, Clone, Copy, Default)]
pub struct HyperParts {
    /// Element-level product of the magic stiffness rows with the basis.
    pub khat: bool,
    /// Magic rows of the sensitivity L.
    pub l_m: bool,
    /// Weighted volume integrals of P and A^v.
    pub averages: bool,
}

/// Output of one restricted assembly pass.
pub struct HyperAssembled {
    /// Magic rows of the residual, length m.
    pub g_m: DVector<f64>,
    /// `(K phibar)_hat`, m x dbar.
    pub khat: Option<DMatrix<f64>>,
    /// Magic rows of the sensitivity, m x 9.
    pub l_m: Option<DMatrix<f64>>,
    /// `sum_{e in E_m} xi_e int_e P dV`.
    pub p_w: Option<Matrix3<f64>>,
    /// `sum_{e in E_m} xi_e int_e A^v dV`.
    pub a_w: Option<SMatrix<f64, 9, 9>>,
}

/// Assembles the magic rows at the given state over `E_m` only.
///
/// `u` is a full-length fluctuation buffer of which only the `I_m` rows
/// are read. `phibar_im` holds the `I_m` rows of the intermediate basis
/// and is required for `khat`; `xi` must align with `magic.elements` and
/// is required for `averages`.
pub fn hyper_assemble(
    rve: &Rve,
    u: &DVector<f64>,
    fbar: &Matrix3<f64>,
    magic: &MagicPoints,
    phibar_im: Option<&DMatrix<f64>>,
    xi: Option<&[f64]>,
    parts: HyperParts,
) -> Result<HyperAssembled> {
    let m = magic.m();
    let dbar = phibar_im.map_or(0, |p| p.ncols());
    if parts.khat && phibar_im.is_none() {
        return Err(Error::InvalidConfig(
            "khat assembly needs the restricted basis rows".into(),
        ));
    }
    if parts.averages && xi.map_or(true, |x| x.len() != magic.elements.len()) {
        return Err(Error::InvalidConfig(
            "weighted averages need one xi per reduced-domain element".into(),
        ));
    }

    let mut g_m = DVector::zeros(m);
    let mut khat = parts.khat.then(|| DMatrix::zeros(m, dbar));
    let mut l_m = parts.l_m.then(|| DMatrix::zeros(m, 9));
    let mut p_w = Matrix3::zeros();
    let mut a_w = SMatrix::<f64, 9, 9>::zeros();

    let fem_parts = AssembleParts {
        stiffness: parts.khat,
        sensitivity: parts.l_m,
        volume_averages: parts.averages,
    };

    for (pos, &e) in magic.elements.iter().enumerate() {
        let out = element_kernel(rve, e, u, fbar, fem_parts)?;
        let dofs = &rve.elems[e].dofs;

        for i in 0..24 {
            let DofRef::Free(gi) = dofs[i] else { continue };
            let Some(row) = magic.magic_pos[gi] else { continue };
            let row = row as usize;
            g_m[row] += out.ge[i];

            if let (Some(khat), Some(ke), Some(pb)) = (khat.as_mut(), &out.ke, phibar_im) {
                for j in 0..24 {
                    let DofRef::Free(gj) = dofs[j] else { continue };
                    let imr = magic.im_pos[gj].expect("element DOF inside I_m") as usize;
                    let kij = ke[i][j];
                    for c in 0..dbar {
                        khat[(row, c)] += kij * pb[(imr, c)];
                    }
                }
            }
            if let (Some(l_m), Some(le)) = (l_m.as_mut(), &out.le) {
                for v in 0..9 {
                    l_m[(row, v)] += le[i][v];
                }
            }
        }

        if parts.averages {
            let w = xi.unwrap()[pos];
            p_w += w * out.p_vol;
            a_w += w * out.a_vol;
        }
    }

    Ok(HyperAssembled {
        g_m,
        khat,
        l_m,
        p_w: parts.averages.then_some(p_w),
        a_w: parts.averages.then_some(a_w),
    })
}

/// Per-element stress integrals and homogenized stresses of a set of
/// training states, stacked for the xi fit (offline, full element loop).
pub struct StressSnapshots {
    /// 9s x |E|: Voigt entries of `int_e P dV`, states stacked by rows.
    pub p_ve: DMatrix<f64>,
    /// 9s: homogenized stress (1/V included), same stacking.
    pub p_vh: DVector<f64>,
}

impl StressSnapshots {
    /// Restricts the columns to the given element subset.
    pub fn restrict(&self, elements: &[usize]) -> DMatrix<f64> {
        self.p_ve.select_columns(elements.iter())
    }
}

/// Collects stress snapshots from converged training states.
pub fn stress_snapshots(rve: &Rve, states: &[&FullState]) -> Result<StressSnapshots> {
    let ne = rve.mesh.num_elements();
    let s = states.len();
    let vol = rve.mesh.volume;
    let mut p_ve = DMatrix::zeros(9 * s, ne);
    let mut p_vh = DVector::zeros(9 * s);
    let parts = AssembleParts {
        volume_averages: true,
        ..Default::default()
    };

    for (i, state) in states.iter().enumerate() {
        let mut total = Matrix3::zeros();
        for e in 0..ne {
            let out = element_kernel(rve, e, &state.u, &state.fbar, parts)?;
            for (c, &(a, b)) in VOIGT9.iter().enumerate() {
                p_ve[(9 * i + c, e)] = out.p_vol[(a, b)];
            }
            total += out.p_vol;
        }
        for (c, &(a, b)) in VOIGT9.iter().enumerate() {
            p_vh[9 * i + c] = total[(a, b)] / vol;
        }
    }
    Ok(StressSnapshots { p_ve, p_vh })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::sparse::mul_dense;
    use crate::fem::{assemble, homogenize};
    use crate::hyper::magic_points;
    use crate::material::{moduli_from_e_nu, Variant};
    use crate::mesh::{build_rve_mesh, Inclusion, MeshSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn test_rve() -> Rve {
        let spec = MeshSpec {
            edge_length: 6.0,
            divisions: 3,
            inclusions: vec![Inclusion {
                center: [2.0, 2.0, 2.0],
                radius: 1.8,
                material_id: 1,
            }],
            matrix_material_id: 0,
        };
        let mesh = build_rve_mesh(&spec).unwrap();
        let m0 = moduli_from_e_nu(1000.0, 0.2, Variant::Stabilized).unwrap();
        let m1 = moduli_from_e_nu(3000.0, 0.2, Variant::Stabilized).unwrap();
        Rve::new(mesh, vec![m0, m1]).unwrap()
    }

    fn test_state(rve: &Rve, seed: u64) -> FullState {
        let mut r = ChaCha12Rng::seed_from_u64(seed);
        let mut fbar = Matrix3::identity();
        fbar[(0, 1)] += 0.04;
        fbar[(0, 0)] += 0.02;
        FullState {
            u: DVector::from_fn(rve.n_dofs(), |_, _| 0.02 * (r.random::<f64>() - 0.5)),
            fbar,
        }
    }

    #[test]
    fn full_domain_restriction_equals_full_assembly() {
        let rve = test_rve();
        let n = rve.n_dofs();
        let state = test_state(&rve, 80);
        // All DOFs magic: E_m is the whole mesh and g_m = Z^T g is the
        // permuted full residual.
        let magic = magic_points(&rve, (0..n).collect());
        assert_eq!(magic.elements.len(), rve.mesh.num_elements());
        assert_eq!(magic.dofs.len(), n);

        let mut r = ChaCha12Rng::seed_from_u64(81);
        let phibar = DMatrix::from_fn(n, 4, |_, _| r.random::<f64>() - 0.5).qr().q();
        let phibar_im = magic.restrict_rows(&phibar);
        let hyp = hyper_assemble(
            &rve,
            &state.u,
            &state.fbar,
            &magic,
            Some(&phibar_im),
            None,
            HyperParts {
                khat: true,
                l_m: true,
                ..Default::default()
            },
        )
        .unwrap();

        let full = assemble(&rve, &state, crate::fem::AssembleParts::homogenization()).unwrap();
        for (j, &dof) in magic.indices.iter().enumerate() {
            assert_eq!(hyp.g_m[j], full.g[dof], "g_m row {j}");
        }
        let kphi = mul_dense(full.k.as_ref().unwrap(), &phibar);
        let khat = hyp.khat.unwrap();
        let scale = kphi.amax();
        for (j, &dof) in magic.indices.iter().enumerate() {
            for c in 0..4 {
                assert!(
                    (khat[(j, c)] - kphi[(dof, c)]).abs() <= 1e-14 * scale,
                    "khat row {j} col {c}"
                );
            }
        }
        let l_m = hyp.l_m.unwrap();
        let l = full.l.as_ref().unwrap();
        for (j, &dof) in magic.indices.iter().enumerate() {
            for v in 0..9 {
                assert_eq!(l_m[(j, v)], l[(dof, v)], "l_m row {j} col {v}");
            }
        }
    }

    #[test]
    fn random_subset_matches_full_assembly_rows() {
        let rve = test_rve();
        let n = rve.n_dofs();
        let state = test_state(&rve, 82);
        let mut r = ChaCha12Rng::seed_from_u64(83);
        let mut picks: Vec<usize> = (0..7).map(|_| r.random_range(0..n)).collect();
        picks.sort_unstable();
        picks.dedup();
        let magic = magic_points(&rve, picks);
        assert!(magic.elements.len() < rve.mesh.num_elements());

        let phibar = DMatrix::from_fn(n, 3, |_, _| r.random::<f64>() - 0.5).qr().q();
        let phibar_im = magic.restrict_rows(&phibar);
        let hyp = hyper_assemble(
            &rve,
            &state.u,
            &state.fbar,
            &magic,
            Some(&phibar_im),
            None,
            HyperParts {
                khat: true,
                l_m: true,
                ..Default::default()
            },
        )
        .unwrap();

        let full = assemble(&rve, &state, crate::fem::AssembleParts::homogenization()).unwrap();
        let kphi = mul_dense(full.k.as_ref().unwrap(), &phibar);
        let gs = full.g.amax();
        let ks = kphi.amax();
        let khat = hyp.khat.unwrap();
        let l_m = hyp.l_m.unwrap();
        let l = full.l.as_ref().unwrap();
        let ls = l.amax();
        for (j, &dof) in magic.indices.iter().enumerate() {
            assert!((hyp.g_m[j] - full.g[dof]).abs() <= 1e-14 * gs);
            for c in 0..3 {
                assert!((khat[(j, c)] - kphi[(dof, c)]).abs() <= 1e-14 * ks);
            }
            for v in 0..9 {
                assert!((l_m[(j, v)] - l[(dof, v)]).abs() <= 1e-14 * ls);
            }
        }
    }

    #[test]
    fn closure_invariants_hold() {
        let rve = test_rve();
        let magic = magic_points(&rve, vec![1, 17, 40]);
        // Every magic DOF is inside I_m.
        for &i in &magic.indices {
            assert!(magic.dofs.binary_search(&i).is_ok());
        }
        // Every DOF of every reduced-domain element is inside I_m.
        for &e in &magic.elements {
            for d in &rve.elems[e].dofs {
                if let DofRef::Free(gi) = d {
                    assert!(magic.dofs.binary_search(gi).is_ok());
                }
            }
        }
        // Elements outside E_m carry no magic DOF.
        for (e, geom) in rve.elems.iter().enumerate() {
            if magic.elements.binary_search(&e).is_err() {
                for d in &geom.dofs {
                    if let DofRef::Free(gi) = d {
                        assert!(magic.magic_pos[*gi].is_none());
                    }
                }
            }
        }
    }

    #[test]
    fn weighted_averages_with_uniform_xi_reproduce_volume_integrals() {
        let rve = test_rve();
        let n = rve.n_dofs();
        let state = test_state(&rve, 84);
        let magic = magic_points(&rve, (0..n).collect());
        let vol = rve.mesh.volume;
        let xi = vec![1.0 / vol; magic.elements.len()];
        let hyp = hyper_assemble(
            &rve,
            &state.u,
            &state.fbar,
            &magic,
            None,
            Some(&xi),
            HyperParts {
                averages: true,
                ..Default::default()
            },
        )
        .unwrap();
        let full = assemble(&rve, &state, crate::fem::AssembleParts::homogenization()).unwrap();
        let p_ref = full.p_vol.unwrap() / vol;
        let a_ref = full.a_vol.unwrap() / vol;
        assert!((hyp.p_w.unwrap() - p_ref).norm() <= 1e-13 * p_ref.norm());
        assert!((hyp.a_w.unwrap() - a_ref).norm() <= 1e-13 * a_ref.norm());
    }

    #[test]
    fn stress_snapshots_consistent_with_homogenization() {
        let rve = test_rve();
        let s1 = test_state(&rve, 85);
        let s2 = test_state(&rve, 86);
        let snaps = stress_snapshots(&rve, &[&s1, &s2]).unwrap();
        assert_eq!(snaps.p_ve.ncols(), rve.mesh.num_elements());
        assert_eq!(snaps.p_ve.nrows(), 18);

        for (i, state) in [&s1, &s2].iter().enumerate() {
            let hom = homogenize(&rve, state).unwrap();
            for (c, &(a, b)) in VOIGT9.iter().enumerate() {
                assert!(
                    (snaps.p_vh[9 * i + c] - hom.pbar[(a, b)]).abs() <= 1e-12,
                    "stacked homogenized stress entry {c} of state {i}"
                );
            }
            // Column sums reproduce the volume integral.
            let row_sum: f64 = (0..rve.mesh.num_elements())
                .map(|e| snaps.p_ve[(9 * i, e)])
                .sum();
            assert!((row_sum / rve.mesh.volume - snaps.p_vh[9 * i]).abs() <= 1e-12);
        }
    }
}
