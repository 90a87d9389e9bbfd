//! Reconstruction factors and nonnegative quadrature weights.
//!
//! DEIM reconstructs the residual from its magic rows by interpolation,
//! `M = Omega (Z^T Omega)^-1`; LEHM instead fits `M` in least squares on
//! the residual snapshots themselves, `M = G G_m^T (G_m G_m^T + eps I)^-1`,
//! which extrapolates rather than interpolates. Only the projected left
//! factor `phibar^T M` (dbar x m) is kept online.
//!
//! The element weights `xi >= 0` extrapolate volume integrals from the
//! reduced integration domain: stacking the nine Voigt entries of each
//! training state's homogenized stress underneath each other gives the
//! target `b` (9s), each candidate element contributes a column of its
//! stress integrals, and `min ||A xi - b||, xi >= 0` is solved by
//! Lawson-Hanson active sets. The 1/V normalization is absorbed into xi.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::lstsq;

use super::MagicPoints;

/// DEIM interpolation model: modes plus the projected left factor.
pub struct DeimModel {
    /// D x m residual POD modes.
    pub omega: DMatrix<f64>,
    /// `phibar^T Omega (Z^T Omega)^-1`, dbar x m.
    pub left_factor: DMatrix<f64>,
}

/// LEHM least-squares model: projected left factor and conditioning info.
pub struct LehmModel {
    /// `phibar^T G G_m^T (G_m G_m^T + eps I)^-1`, dbar x m.
    pub left_factor: DMatrix<f64>,
    /// Condition estimate of the ridged normal matrix.
    pub condition: f64,
}

/// Nonnegative element weights for restricted volume integration.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct XiWeights {
    /// Element ids carrying the weights (the reduced integration domain).
    pub elements: Vec<usize>,
    /// Weight per element, aligned with `elements`; includes 1/V.
    pub xi: Vec<f64>,
    /// Final least-squares residual of the fit.
    pub residual: f64,
}

/// Fits the DEIM interpolation factor for the given intermediate basis.
pub fn deim_fit(
    omega: &DMatrix<f64>,
    magic: &MagicPoints,
    phibar: &DMatrix<f64>,
) -> Result<DeimModel> {
    let m = magic.m();
    if omega.ncols() != m || omega.nrows() != phibar.nrows() {
        return Err(Error::Dimension(format!(
            "DEIM modes {}x{} inconsistent with m = {m}, D = {}",
            omega.nrows(),
            omega.ncols(),
            phibar.nrows()
        )));
    }
    let zt_omega = magic.restrict_magic_rows(omega);
    let inv = zt_omega.clone().lu().try_inverse().ok_or_else(|| {
        Error::Singular("DEIM selection matrix Z^T Omega is singular".into())
    })?;
    Ok(DeimModel {
        omega: omega.clone(),
        left_factor: phibar.transpose() * omega * inv,
    })
}

/// Fits the LEHM extrapolation factor; `eps <= 0` selects the default
/// ridge `1e-10 trace(G_m G_m^T) / m`.
pub fn lehm_fit(
    g: &DMatrix<f64>,
    magic: &MagicPoints,
    phibar: &DMatrix<f64>,
    eps: f64,
) -> Result<LehmModel> {
    let m = magic.m();
    if g.nrows() != phibar.nrows() {
        return Err(Error::Dimension(format!(
            "residual snapshots have {} rows, basis has {}",
            g.nrows(),
            phibar.nrows()
        )));
    }
    let gm = magic.restrict_magic_rows(g);
    let mut normal = &gm * gm.transpose();
    let eps = if eps > 0.0 {
        eps
    } else {
        1e-10 * normal.trace() / m as f64
    };
    for i in 0..m {
        normal[(i, i)] += eps;
    }
    let eigs = normal.clone().symmetric_eigenvalues();
    let condition = eigs.max() / eigs.min().max(f64::MIN_POSITIVE);

    // M = G G_m^T N^-1 projected onto phibar; solve N X = (phibar^T G G_m^T)^T
    // instead of inverting N explicitly.
    let bt = phibar.transpose() * g * gm.transpose();
    let x = match normal.clone().cholesky() {
        Some(ch) => ch.solve(&bt.transpose()),
        None => normal
            .lu()
            .solve(&bt.transpose())
            .ok_or_else(|| Error::Singular("LEHM normal matrix singular despite ridge".into()))?,
    };
    Ok(LehmModel {
        left_factor: x.transpose(),
        condition,
    })
}

/// Lawson-Hanson nonnegative least squares: `min ||a x - b||, x >= 0`.
///
/// Returns the weights and the residual norm. `tol` gates the dual
/// optimality test `max_i (a^T (b - a x))_i <= tol * scale`.
pub fn nnls(a: &DMatrix<f64>, b: &DVector<f64>, tol: f64) -> (DVector<f64>, f64) {
    let n = a.ncols();
    let mut x = DVector::zeros(n);
    let mut passive = vec![false; n];
    let scale = (a.transpose() * b).amax().max(1.0);
    let max_outer = 3 * n + 30;

    for _ in 0..max_outer {
        let w = a.transpose() * (b - a * &x);
        let mut best: Option<(usize, f64)> = None;
        for i in 0..n {
            if !passive[i] && w[i] > tol * scale {
                if best.map_or(true, |(_, bw)| w[i] > bw) {
                    best = Some((i, w[i]));
                }
            }
        }
        let Some((enter, _)) = best else { break };
        passive[enter] = true;

        // Inner loop: least squares on the passive set, stepping back when
        // a passive coefficient would go negative. Each pass drops at
        // least the step-limiting index, so it ends within n passes.
        for _ in 0..=n {
            let idx: Vec<usize> = (0..n).filter(|&i| passive[i]).collect();
            let ap = a.select_columns(idx.iter());
            let z = lstsq(&ap, &DMatrix::from_column_slice(b.len(), 1, b.as_slice()), 1e-12);
            let z = z.column(0).into_owned();

            if z.iter().all(|&v| v > 0.0) {
                x.fill(0.0);
                for (p, &i) in idx.iter().enumerate() {
                    x[i] = z[p];
                }
                break;
            }

            let mut alpha = f64::INFINITY;
            let mut limiter = None;
            for (p, &i) in idx.iter().enumerate() {
                if z[p] <= 0.0 {
                    let denom = x[i] - z[p];
                    let step = if denom > 0.0 { x[i] / denom } else { 0.0 };
                    if step < alpha {
                        alpha = step;
                        limiter = Some(i);
                    }
                }
            }
            for (p, &i) in idx.iter().enumerate() {
                x[i] += alpha * (z[p] - x[i]);
            }
            if let Some(i) = limiter {
                x[i] = 0.0;
                passive[i] = false;
            }
        }
    }

    let residual = (b - a * &x).norm();
    (x, residual)
}

/// Fits nonnegative element weights on stacked stress snapshots.
///
/// `p_ve`: 9s x |E_m| columns of per-element stress integrals over the
/// reduced integration domain; `p_vh`: 9s stacked homogenized stresses.
pub fn fit_xi(
    p_ve: &DMatrix<f64>,
    p_vh: &DVector<f64>,
    elements: &[usize],
) -> Result<XiWeights> {
    if p_ve.ncols() != elements.len() {
        return Err(Error::Dimension(format!(
            "{} stress columns for {} elements",
            p_ve.ncols(),
            elements.len()
        )));
    }
    if p_ve.nrows() != p_vh.len() || p_ve.nrows() % 9 != 0 {
        return Err(Error::Dimension(format!(
            "stacked stress rows {} inconsistent with targets {}",
            p_ve.nrows(),
            p_vh.len()
        )));
    }
    if p_ve.amax() == 0.0 {
        return Err(Error::InvalidConfig(
            "all-zero stress snapshots cannot determine xi weights".into(),
        ));
    }
    let (xi, residual) = nnls(p_ve, p_vh, 1e-10);
    Ok(XiWeights {
        elements: elements.to_vec(),
        xi: xi.iter().copied().collect(),
        residual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hyper::select::select_magic_indices;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    /// MagicPoints with a trivial closure for algebra-level tests.
    fn bare_magic(indices: Vec<usize>, n_free: usize) -> MagicPoints {
        let dofs: Vec<usize> = (0..n_free).collect();
        let mut im_pos = vec![None; n_free];
        for (p, &d) in dofs.iter().enumerate() {
            im_pos[d] = Some(p as u32);
        }
        let mut magic_pos = vec![None; n_free];
        for (p, &d) in indices.iter().enumerate() {
            magic_pos[d] = Some(p as u32);
        }
        MagicPoints {
            indices,
            elements: Vec::new(),
            dofs,
            im_pos,
            magic_pos,
        }
    }

    #[test]
    fn deim_reconstruction_interpolates_at_magic_points() {
        let mut r = ChaCha12Rng::seed_from_u64(70);
        let d = 18;
        let g = DMatrix::from_fn(d, 12, |_, _| r.random::<f64>() - 0.5);
        let m = 5;
        let (idx, omega) = select_magic_indices(&g, m).unwrap();
        let magic = bare_magic(idx, d);
        let phibar = DMatrix::identity(d, d);
        let model = deim_fit(&omega, &magic, &phibar).unwrap();

        // With phibar = I the left factor is M itself; Z^T M g_m = g_m for
        // arbitrary magic values.
        let gm = DVector::from_fn(m, |i, _| (i as f64 + 1.0) * 0.37 - 1.0);
        let rec = &model.left_factor * &gm;
        for (j, &dof) in magic.indices.iter().enumerate() {
            assert!(
                (rec[dof] - gm[j]).abs() < 1e-12,
                "interpolation violated at magic point {j}"
            );
        }
    }

    #[test]
    fn deim_snapshot_reconstruction_bounded_by_pod_tail() {
        let mut r = ChaCha12Rng::seed_from_u64(71);
        let d = 24;
        // Snapshots with decaying spectrum so the tail is meaningful.
        let base = DMatrix::from_fn(d, 10, |_, _| r.random::<f64>() - 0.5);
        let svd = base.clone().svd(true, true);
        let mut g = DMatrix::zeros(d, 10);
        for k in 0..10 {
            let sigma = 3.0_f64.powi(-(k as i32));
            g += sigma
                * svd.u.as_ref().unwrap().column(k)
                * svd.v_t.as_ref().unwrap().row(k);
        }
        let m = 4;
        let (idx, omega) = select_magic_indices(&g, m).unwrap();
        let magic = bare_magic(idx, d);
        let model = deim_fit(&omega, &magic, &DMatrix::identity(d, d)).unwrap();

        let pod = crate::reduce::pod_fit(&g, m).unwrap();
        let tail: f64 = pod.singular_values[m..].iter().map(|s| s * s).sum::<f64>();
        // Standard DEIM bound: error <= ||(Z^T Omega)^-1|| * POD tail. The
        // amplification factor is the inverse smallest singular value of
        // the selection matrix.
        let zt = magic.restrict_magic_rows(&omega);
        let amp = 1.0 / zt.svd(false, false).singular_values.min();
        let gm = magic.restrict_magic_rows(&g);
        let err = (&model.left_factor * gm - &g).norm();
        assert!(
            err <= amp * tail.sqrt() * (1.0 + 1e-9),
            "DEIM reconstruction error {err} above bound {}",
            amp * tail.sqrt()
        );
    }

    #[test]
    fn lehm_matches_normal_equation_oracle() {
        // 20 x 8 toy snapshots, 3 magic points, ridge small enough to be
        // negligible against the oracle built by explicit inversion.
        let mut r = ChaCha12Rng::seed_from_u64(72);
        let g = DMatrix::from_fn(20, 8, |_, _| r.random::<f64>() - 0.5);
        let idx = vec![3, 11, 17];
        let magic = bare_magic(idx.clone(), 20);
        let phibar = DMatrix::identity(20, 20);
        let eps = 1e-13;
        let model = lehm_fit(&g, &magic, &phibar, eps).unwrap();

        let gm = magic.restrict_magic_rows(&g);
        let mut normal = &gm * gm.transpose();
        for i in 0..3 {
            normal[(i, i)] += eps;
        }
        let oracle = &g * gm.transpose() * normal.try_inverse().unwrap();
        assert!(
            (&model.left_factor - &oracle).norm() < 1e-9,
            "LEHM factor deviates from dense oracle"
        );
        assert!(model.condition.is_finite() && model.condition >= 1.0);
    }

    #[test]
    fn lehm_projection_consistent_with_full_factor() {
        let mut r = ChaCha12Rng::seed_from_u64(73);
        let g = DMatrix::from_fn(16, 7, |_, _| r.random::<f64>() - 0.5);
        let magic = bare_magic(vec![0, 5, 9, 14], 16);
        let phibar = DMatrix::from_fn(16, 3, |_, _| r.random::<f64>() - 0.5)
            .qr()
            .q();
        let full = lehm_fit(&g, &magic, &DMatrix::identity(16, 16), 1e-12).unwrap();
        let proj = lehm_fit(&g, &magic, &phibar, 1e-12).unwrap();
        assert!((phibar.transpose() * &full.left_factor - &proj.left_factor).norm() < 1e-11);
    }

    #[test]
    fn nnls_matches_unconstrained_solution_when_interior() {
        // Well-conditioned system whose least-squares solution is strictly
        // positive: the constraint is inactive and NNLS must agree.
        let mut r = ChaCha12Rng::seed_from_u64(74);
        let a = DMatrix::from_fn(10, 3, |i, j| {
            if i % 3 == j { 2.0 } else { 0.2 * r.random::<f64>() }
        });
        let x_true = DVector::from_vec(vec![1.0, 2.0, 0.5]);
        let b = &a * &x_true;
        let (x, res) = nnls(&a, &b, 1e-10);
        assert!((x - x_true).norm() < 1e-9);
        assert!(res < 1e-9);
    }

    #[test]
    fn nnls_clamps_negative_coordinates_to_zero() {
        // b is chosen so the unconstrained optimum has a negative entry;
        // the active-set solution zeroes it and solves on the rest.
        let a = DMatrix::from_column_slice(3, 2, &[1.0, 0.0, 0.0, 0.9, 0.1, 0.0]);
        let b = DVector::from_vec(vec![-1.0, 1.0, 0.0]);
        let (x, _) = nnls(&a, &b, 1e-10);
        assert!(x.iter().all(|&v| v >= 0.0));
        // Oracle by brute-force over the four active-set sign patterns.
        let mut best = (f64::INFINITY, DVector::zeros(2));
        for mask in 0..4 {
            let cols: Vec<usize> = (0..2).filter(|i| mask & (1 << i) != 0).collect();
            let mut cand = DVector::zeros(2);
            if !cols.is_empty() {
                let ap = a.select_columns(cols.iter());
                let z = lstsq(
                    &ap,
                    &DMatrix::from_column_slice(3, 1, b.as_slice()),
                    1e-12,
                );
                if z.iter().any(|&v| v < 0.0) {
                    continue;
                }
                for (p, &i) in cols.iter().enumerate() {
                    cand[i] = z[(p, 0)];
                }
            }
            let res = (&b - &a * &cand).norm();
            if res < best.0 {
                best = (res, cand);
            }
        }
        assert!((x - best.1).norm() < 1e-9);
    }

    #[test]
    fn xi_fit_on_uniform_stress_reaches_zero_residual() {
        // Uniform stress across 5 equal-volume elements: any xi with
        // sum(xi_e V_e) = 1 is exact, so the NNLS residual must vanish.
        let ve = 2.0;
        let s = 3;
        let mut p_ve = DMatrix::zeros(9 * s, 5);
        let mut p_vh = DVector::zeros(9 * s);
        let mut r = ChaCha12Rng::seed_from_u64(75);
        for snap in 0..s {
            let stress = DVector::from_fn(9, |_, _| r.random::<f64>() - 0.3);
            for e in 0..5 {
                for c in 0..9 {
                    p_ve[(9 * snap + c, e)] = stress[c] * ve;
                }
            }
            for c in 0..9 {
                p_vh[9 * snap + c] = stress[c];
            }
        }
        let w = fit_xi(&p_ve, &p_vh, &[0, 1, 2, 3, 4]).unwrap();
        assert!(w.residual < 1e-10, "residual {}", w.residual);
        assert!(w.xi.iter().all(|&x| x >= 0.0));
        let total: f64 = w.xi.iter().map(|x| x * ve).sum();
        assert!((total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn xi_single_element_recovers_inverse_volume() {
        // One element of volume V_e representing the whole (homogeneous)
        // domain: xi = 1/V_e reproduces the homogenized stress exactly.
        let ve = 3.5;
        let stress = DVector::from_vec(vec![2.0, 1.0, 1.0, 0.2, 0.1, 0.0, 0.2, 0.1, 0.0]);
        let p_ve = DMatrix::from_column_slice(9, 1, (stress.clone() * ve).as_slice());
        let w = fit_xi(&p_ve, &stress, &[7]).unwrap();
        assert!((w.xi[0] - 1.0 / ve).abs() < 1e-12);
        assert!(w.residual < 1e-12);
    }

    #[test]
    fn xi_three_element_fit_matches_grid_search() {
        let mut r = ChaCha12Rng::seed_from_u64(76);
        let p_ve = DMatrix::from_fn(9, 3, |_, _| r.random::<f64>());
        let p_vh = DVector::from_fn(9, |_, _| r.random::<f64>() * 0.5);
        let w = fit_xi(&p_ve, &p_vh, &[0, 1, 2]).unwrap();

        // Exhaustive nonnegative grid search, refined around the incumbent
        // until the step reaches 1e-3. The objective is convex, so local
        // refinement cannot miss the global optimum by more than the final
        // grid resolution.
        let mut center = DVector::from_vec(vec![1.0, 1.0, 1.0]);
        let mut step = 0.25;
        let mut best = f64::INFINITY;
        while step >= 1e-3 / 2.0 {
            let mut best_xi = center.clone();
            for i in -8i32..=8 {
                for j in -8i32..=8 {
                    for k in -8i32..=8 {
                        let xi = DVector::from_vec(vec![
                            (center[0] + i as f64 * step).max(0.0),
                            (center[1] + j as f64 * step).max(0.0),
                            (center[2] + k as f64 * step).max(0.0),
                        ]);
                        let res = (&p_vh - &p_ve * &xi).norm_squared();
                        if res < best {
                            best = res;
                            best_xi = xi;
                        }
                    }
                }
            }
            center = best_xi;
            step /= 2.0;
        }
        assert!(
            w.residual.powi(2) <= best + 1e-6,
            "NNLS objective {} above grid optimum {best}",
            w.residual.powi(2)
        );
    }

    #[test]
    fn xi_rejects_all_zero_snapshots() {
        let p_ve = DMatrix::zeros(9, 2);
        let p_vh = DVector::zeros(9);
        assert!(fit_xi(&p_ve, &p_vh, &[0, 1]).is_err());
    }
}
