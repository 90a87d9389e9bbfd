//! Online hyperreduced Newton driver and hyperreduced homogenization.
//!
//! One load step runs entirely in small coordinates: cluster or chart
//! selection in parameter space, then per Newton iteration a restricted
//! reconstruction on `I_m`, assembly over `E_m`, projection through the
//! precomputed left factor and a dense d x d solve (DEIM/LEHM) or an
//! m x d least squares (LSPG). The only full-length object online is one
//! scatter buffer allocated before the path loop whose `I_m` rows are
//! rewritten each iteration; no per-iteration work or allocation grows
//! with D or |E|.

use std::fmt;
use std::time::Instant;

use nalgebra::{DMatrix, DVector, Matrix3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fem::{FullState, HomogenizedResponse, NewtonOpts, Rve, SolveStatus, Timings};
use crate::galerkin::ResidualSet;
use crate::linalg::lstsq_vec;
use crate::reduce::{
    embed_init, local_chart, lpod_select_by_param, pm_tangent, LocalChart, PmModel, ReduceParams,
    ReducedModel,
};

use super::assemble::{hyper_assemble, HyperParts, StressSnapshots};
use super::fit::{deim_fit, fit_xi, lehm_fit, XiWeights};
use super::select::{magic_points, select_magic_indices, MagicPoints};

/// Residual reconstruction operator of the hyperreduced solver.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HyperMethod {
    /// Interpolatory reconstruction from residual POD modes.
    Deim,
    /// Gappy least-squares reconstruction from residual snapshots.
    Lehm,
    /// Least-squares collocation at the magic points, no reconstruction.
    Lspg,
}

impl fmt::Display for HyperMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HyperMethod::Deim => "deim",
            HyperMethod::Lehm => "lehm",
            HyperMethod::Lspg => "lspg",
        })
    }
}

/// Everything the online phase needs, precomputed offline. Immutable
/// after the fit; one model serves any number of concurrent load paths.
pub struct HyperModel {
    pub method: HyperMethod,
    pub magic: MagicPoints,
    /// Per-cluster left factor `phibar^T M`, dbar x m. Empty for LSPG,
    /// which projects with the operator itself.
    pub left: Vec<DMatrix<f64>>,
    /// Per-cluster `I_m` rows of the intermediate basis, |I_m| x dbar.
    pub phibar_im: Vec<DMatrix<f64>>,
    /// Per-cluster magic rows of the intermediate basis, m x dbar.
    pub phibar_magic: Vec<DMatrix<f64>>,
    /// Nonnegative quadrature weights on `E_m`, 1/V absorbed.
    pub xi: XiWeights,
    /// Largest ridge-regularized condition estimate over clusters (LEHM).
    pub lehm_condition: Option<f64>,
}

/// Fits the hyperreduction on top of a trained approximation space:
/// magic points from the residual snapshots, per-cluster left factors,
/// restricted basis rows and the stress-fitted quadrature weights.
pub fn build_hyper_model(
    rve: &Rve,
    model: &ReducedModel,
    residuals: &ResidualSet,
    stress: &StressSnapshots,
    method: HyperMethod,
    m: usize,
    lehm_eps: f64,
) -> Result<HyperModel> {
    if method == HyperMethod::Lspg && m < model.dim() {
        return Err(Error::InvalidConfig(format!(
            "LSPG collocation needs m >= d, got m = {m}, d = {}",
            model.dim()
        )));
    }
    let (indices, omega) = select_magic_indices(&residuals.g, m)?;
    let magic = magic_points(rve, indices);

    let nc = model.n_clusters();
    let mut left = Vec::with_capacity(nc);
    let mut phibar_im = Vec::with_capacity(nc);
    let mut phibar_magic = Vec::with_capacity(nc);
    let mut lehm_condition: Option<f64> = None;
    for c in 0..nc {
        let phibar = model.basis(c);
        phibar_im.push(magic.restrict_rows(phibar));
        phibar_magic.push(magic.restrict_magic_rows(phibar));
        match method {
            HyperMethod::Deim => left.push(deim_fit(&omega, &magic, phibar)?.left_factor),
            HyperMethod::Lehm => {
                let fit = lehm_fit(&residuals.g, &magic, phibar, lehm_eps)?;
                lehm_condition =
                    Some(lehm_condition.unwrap_or(0.0).max(fit.condition));
                left.push(fit.left_factor);
            }
            HyperMethod::Lspg => {}
        }
    }

    let p_ve_m = stress.restrict(&magic.elements);
    let xi = fit_xi(&p_ve_m, &stress.p_vh, &magic.elements)?;

    Ok(HyperModel {
        method,
        magic,
        left,
        phibar_im,
        phibar_magic,
        xi,
        lehm_condition,
    })
}

/// The exact-integration weights 1/V on every element of `E_m`. With
/// `E_m = E` these reproduce plain volume averaging; used for the limit
/// checks rather than fitted extrapolation.
pub fn volumetric_xi(rve: &Rve, magic: &MagicPoints) -> XiWeights {
    let v = rve.mesh.volume;
    XiWeights {
        elements: magic.elements.clone(),
        xi: vec![1.0 / v; magic.elements.len()],
        residual: 0.0,
    }
}

/// Projects the restricted system through the left factor and the step
/// chart: `g_hred = phitilde^T (phibar^T M) g_m` and the matching
/// hyperreduced stiffness. `None` stands for the identity chart.
pub(crate) fn project_deimlike(
    left: &DMatrix<f64>,
    khat: &DMatrix<f64>,
    g_m: &DVector<f64>,
    phitilde: Option<&DMatrix<f64>>,
) -> (DMatrix<f64>, DVector<f64>) {
    let lg = left * g_m;
    let lk = left * khat;
    match phitilde {
        Some(p) => (p.transpose() * &lk * p, p.transpose() * &lg),
        None => (lk, lg),
    }
}

/// Dense Newton solve `K_hred dy = -g_hred`, Cholesky first, LU fallback.
fn solve_newton_system(k_hred: DMatrix<f64>, g_hred: &DVector<f64>) -> Result<DVector<f64>> {
    let rhs = -g_hred;
    match k_hred.clone().cholesky() {
        Some(ch) => Ok(ch.solve(&rhs)),
        None => k_hred
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::Singular("singular hyperreduced stiffness".into())),
    }
}

/// One DEIM/LEHM Newton step: projects the restricted assembly and solves
/// the dense hyperreduced system for the update.
pub fn hyper_newton_step_deimlike(
    left: &DMatrix<f64>,
    khat: &DMatrix<f64>,
    g_m: &DVector<f64>,
    phitilde: Option<&DMatrix<f64>>,
) -> Result<DVector<f64>> {
    let (k_hred, g_hred) = project_deimlike(left, khat, g_m, phitilde);
    solve_newton_system(k_hred, &g_hred)
}

/// Outcome of one LSPG least-squares step.
pub struct LspgStep {
    pub dy: DVector<f64>,
    /// Normal-equation gradient `(khat phitilde)^T g_m` at the iterate;
    /// its max-norm over [`LspgStep::scale`] is the convergence gauge.
    pub gradient: DVector<f64>,
    /// RMS entry magnitude of the least-squares operator, making the
    /// gauge commensurate with the residual scale.
    pub scale: f64,
    /// The operator was numerically rank-deficient and the minimum-norm
    /// solution was used.
    pub rank_warning: bool,
}

/// RMS entry magnitude of a matrix; 1 for an all-zero matrix.
fn rms_scale(a: &DMatrix<f64>) -> f64 {
    let n = (a.nrows() * a.ncols()) as f64;
    let s = a.norm() / n.sqrt();
    if s > 0.0 {
        s
    } else {
        1.0
    }
}

/// Thin-QR least squares `min |kphi dy - rhs|` where `rhs` is `-g_m` for
/// the Newton-consistent objective and `+g_m` when replaying the printed
/// form. Falls back to the minimum-norm solution on rank deficiency.
fn lspg_least_squares(
    kphi: &DMatrix<f64>,
    g_m: &DVector<f64>,
    paper_sign: bool,
) -> (DVector<f64>, bool) {
    let rhs = if paper_sign { g_m.clone() } else { -g_m };
    let d = kphi.ncols();
    let qr = kphi.clone().qr();
    let r = qr.r();
    let rmax = (0..d).map(|i| r[(i, i)].abs()).fold(0.0_f64, f64::max);
    if rmax > 0.0 && (0..d).all(|i| r[(i, i)].abs() > 1e-12 * rmax) {
        let qtb = qr.q().transpose() * &rhs;
        let dy = r
            .solve_upper_triangular(&qtb)
            .expect("R is nonsingular by the diagonal check");
        (dy, false)
    } else {
        (lstsq_vec(kphi, &rhs, 1e-12), true)
    }
}

/// One LSPG step: `dy = argmin |(khat phitilde) dy + g_m|` via thin QR.
/// Requires at least as many magic points as online coordinates.
pub fn hyper_newton_step_lspg(
    khat: &DMatrix<f64>,
    g_m: &DVector<f64>,
    phitilde: Option<&DMatrix<f64>>,
    paper_sign: bool,
) -> Result<LspgStep> {
    let kphi = match phitilde {
        Some(p) => khat * p,
        None => khat.clone(),
    };
    let (m, d) = kphi.shape();
    if m < d {
        return Err(Error::InvalidConfig(format!(
            "LSPG collocation needs m >= d, got m = {m}, d = {d}"
        )));
    }
    let gradient = kphi.transpose() * g_m;
    let scale = rms_scale(&kphi);
    let (dy, rank_warning) = lspg_least_squares(&kphi, g_m, paper_sign);
    Ok(LspgStep {
        dy,
        gradient,
        scale,
        rank_warning,
    })
}

/// Hyperreduced homogenization at a state given through the full-length
/// scatter buffer `u` (only `I_m` rows are read): weighted restricted
/// volume integrals plus the reduced sensitivity correction
/// `Abar = sum xi int A dV - (1/V) L_hred^T S_hred`.
pub fn hyper_homogenize(
    rve: &Rve,
    hm: &HyperModel,
    cluster: usize,
    phitilde: Option<&DMatrix<f64>>,
    u: &DVector<f64>,
    fbar: &Matrix3<f64>,
) -> Result<HomogenizedResponse> {
    let asm = hyper_assemble(
        rve,
        u,
        fbar,
        &hm.magic,
        Some(&hm.phibar_im[cluster]),
        Some(&hm.xi.xi),
        HyperParts {
            khat: true,
            l_m: true,
            averages: true,
        },
    )?;
    let khat = asm.khat.expect("khat assembled");
    let l_m = asm.l_m.expect("sensitivity rows assembled");
    let vol = rve.mesh.volume;

    let (l_hred, s_hred) = match hm.method {
        HyperMethod::Deim | HyperMethod::Lehm => {
            let left = &hm.left[cluster];
            let lk = left * &khat;
            let ll = left * &l_m;
            let (k_hred, l_hred) = match phitilde {
                Some(p) => (p.transpose() * &lk * p, p.transpose() * &ll),
                None => (lk, ll),
            };
            let s_hred = match k_hred.clone().cholesky() {
                Some(ch) => ch.solve(&l_hred),
                None => k_hred.lu().solve(&l_hred).ok_or_else(|| {
                    Error::Singular("singular hyperreduced stiffness in homogenization".into())
                })?,
            };
            (l_hred, s_hred)
        }
        HyperMethod::Lspg => {
            // Petrov-Galerkin test space: the normal equations of the
            // collocated operator, with the solution basis restricted to
            // the magic rows on the left of L_m.
            let kphi = match phitilde {
                Some(p) => &khat * p,
                None => khat.clone(),
            };
            let a_ne = kphi.transpose() * &kphi;
            let rhs = kphi.transpose() * &l_m;
            let s_hred = match a_ne.clone().cholesky() {
                Some(ch) => ch.solve(&rhs),
                None => a_ne.lu().solve(&rhs).ok_or_else(|| {
                    Error::Singular("singular LSPG normal equations in homogenization".into())
                })?,
            };
            let pml = hm.phibar_magic[cluster].transpose() * &l_m;
            let l_hred = match phitilde {
                Some(p) => p.transpose() * &pml,
                None => pml,
            };
            (l_hred, s_hred)
        }
    };

    let correction = l_hred.transpose() * &s_hred / vol;
    let pbar = asm.p_w.expect("weighted averages assembled");
    let mut abar = asm.a_w.expect("weighted averages assembled");
    for i in 0..9 {
        for j in 0..9 {
            abar[(i, j)] -= correction[(i, j)];
        }
    }
    Ok(HomogenizedResponse {
        pbar,
        abar,
        svec: s_hred,
    })
}

/// Borrowed inputs of one online run.
pub struct HyperRunConfig<'a> {
    pub rve: &'a Rve,
    pub model: &'a ReducedModel,
    pub rp: &'a ReduceParams,
    pub hyper: &'a HyperModel,
    pub opts: &'a NewtonOpts,
    /// Replay the printed LSPG objective sign instead of the
    /// Newton-consistent one.
    pub lspg_paper_sign: bool,
    /// Reconstruct converged steps to full length for diagnostics. This
    /// is the one opt-in O(D) operation; leave off when timing.
    pub record_full_states: bool,
    /// Evaluate the homogenized response after each converged step.
    pub homogenize: bool,
}

/// Per-step outcome of a hyperreduced path replay.
pub struct HyperStepReport {
    pub fbar: Matrix3<f64>,
    pub status: SolveStatus,
    pub newton_iters: usize,
    /// Convergence gauge at exit: max entry of the hyperreduced residual
    /// (DEIM/LEHM) or the scaled normal-equation gradient (LSPG).
    pub res_hred: f64,
    pub cluster: Option<usize>,
    pub chart_ridged: bool,
    pub lspg_rank_warning: bool,
    pub response: Option<HomogenizedResponse>,
}

/// A completed hyperreduced load-path run.
pub struct HyperRun {
    pub steps: Vec<HyperStepReport>,
    /// Diagnostic full-space reconstructions, `None` unless requested
    /// and converged.
    pub states: Vec<Option<FullState>>,
    pub timings: Timings,
    pub divergences: usize,
}

/// Replays a load path with the hyperreduced solver. A diverged step
/// keeps the last converged coordinates and the path continues, mirroring
/// the Galerkin driver.
pub fn run_hyper_rve(cfg: &HyperRunConfig, path: &[Matrix3<f64>]) -> Result<HyperRun> {
    let rve = cfg.rve;
    let hm = cfg.hyper;
    let magic = &hm.magic;
    let d = cfg.model.dim();
    if hm.phibar_im.len() != cfg.model.n_clusters() {
        return Err(Error::Dimension(format!(
            "hyper model carries {} clusters, approximation space has {}",
            hm.phibar_im.len(),
            cfg.model.n_clusters()
        )));
    }

    // The single full-length buffer; only I_m rows are touched online.
    let mut u_buf = DVector::zeros(rve.n_dofs());
    let mut y_prev = DVector::zeros(d);
    let mut ybar_prev = DVector::zeros(hm.phibar_im[0].ncols());
    let mut cluster_prev: Option<usize> = None;

    let mut steps = Vec::with_capacity(path.len());
    let mut states: Vec<Option<FullState>> = Vec::with_capacity(path.len());
    let mut timings = Timings::default();
    let mut divergences = 0usize;

    for fbar in path {
        let t_chart = Instant::now();
        let mut chart_ridged = false;
        let mut cluster = None;
        let mut cid = 0usize;
        let mut phitilde: Option<DMatrix<f64>> = None;
        let mut offset: Option<DVector<f64>> = None;
        let mut pm_model: Option<&PmModel> = None;
        let mut y = match cfg.model {
            ReducedModel::Pod(_) => y_prev.clone(),
            ReducedModel::Lpod(m) => {
                // Parameter-space cluster selection: the full-space
                // centroid distance of the offline phase would be O(D).
                let c = lpod_select_by_param(m, fbar);
                cid = c;
                cluster = Some(c);
                match cluster_prev {
                    Some(prev) => m.carry(&y_prev, prev, c),
                    None => y_prev.clone(),
                }
            }
            ReducedModel::Pm(m) => {
                pm_model = Some(m);
                y_prev.clone()
            }
            ReducedModel::Lle(m) => {
                let chart = local_chart(m, fbar, cfg.rp.resolved_n_chart(m.y.ncols()))?;
                let y0 = embed_init(&chart, &ybar_prev)?;
                let LocalChart {
                    phitilde: pt,
                    u0,
                    ridged,
                    ..
                } = chart;
                chart_ridged = ridged;
                phitilde = Some(pt);
                offset = Some(u0);
                y0
            }
        };
        timings.chart += t_chart.elapsed().as_secs_f64();

        let phibar_im_c = &hm.phibar_im[cid];
        let left = match hm.method {
            HyperMethod::Deim | HyperMethod::Lehm => Some(&hm.left[cid]),
            HyperMethod::Lspg => None,
        };

        let mut iter = 0usize;
        let mut rank_warning = false;
        let (status, res_exit, ybar_conv) = loop {
            let t = Instant::now();
            let ybar = match pm_model {
                Some(m) => {
                    phitilde = Some(pm_tangent(m, &y));
                    m.ybar(&y)
                }
                None => match (&phitilde, &offset) {
                    (Some(pt), Some(o)) => pt * &y + o,
                    (Some(pt), None) => pt * &y,
                    (None, _) => y.clone(),
                },
            };
            let u_im = phibar_im_c * &ybar;
            for (r, &dof) in magic.dofs.iter().enumerate() {
                u_buf[dof] = u_im[r];
            }
            timings.projection += t.elapsed().as_secs_f64();

            let t = Instant::now();
            let asm = match hyper_assemble(
                rve,
                &u_buf,
                fbar,
                magic,
                Some(phibar_im_c),
                None,
                HyperParts {
                    khat: true,
                    ..Default::default()
                },
            ) {
                Ok(a) => a,
                Err(Error::InvertedElement {
                    element,
                    gauss,
                    det_f,
                }) => {
                    timings.assembly += t.elapsed().as_secs_f64();
                    break (
                        SolveStatus::Diverged {
                            reason: format!(
                                "inverted element {element} at gauss point {gauss} (det F = {det_f:.3e})"
                            ),
                        },
                        f64::INFINITY,
                        ybar,
                    );
                }
                Err(e) => return Err(e),
            };
            timings.assembly += t.elapsed().as_secs_f64();
            let khat = asm.khat.as_ref().expect("khat assembled");

            let (res, dy) = match hm.method {
                HyperMethod::Deim | HyperMethod::Lehm => {
                    let t = Instant::now();
                    let (k_hred, g_hred) =
                        project_deimlike(left.expect("left factor"), khat, &asm.g_m, phitilde.as_ref());
                    timings.projection += t.elapsed().as_secs_f64();
                    let res = g_hred.amax();
                    if res <= cfg.opts.tol_red {
                        break (SolveStatus::Converged, res, ybar);
                    }
                    if iter >= cfg.opts.max_iter || !res.is_finite() {
                        break (
                            SolveStatus::Diverged {
                                reason: format!(
                                    "no convergence within {} hyperreduced iterations",
                                    cfg.opts.max_iter
                                ),
                            },
                            res,
                            ybar,
                        );
                    }
                    let t = Instant::now();
                    let dy = match solve_newton_system(k_hred, &g_hred) {
                        Ok(dy) => dy,
                        Err(_) => {
                            timings.linear_solve += t.elapsed().as_secs_f64();
                            break (
                                SolveStatus::Diverged {
                                    reason: "singular hyperreduced stiffness".into(),
                                },
                                res,
                                ybar,
                            );
                        }
                    };
                    timings.linear_solve += t.elapsed().as_secs_f64();
                    (res, dy)
                }
                HyperMethod::Lspg => {
                    let t = Instant::now();
                    let kphi = match phitilde.as_ref() {
                        Some(p) => khat * p,
                        None => khat.clone(),
                    };
                    let gradient = kphi.transpose() * &asm.g_m;
                    let res = gradient.amax() / rms_scale(&kphi);
                    timings.projection += t.elapsed().as_secs_f64();
                    if res <= cfg.opts.tol_red {
                        break (SolveStatus::Converged, res, ybar);
                    }
                    if iter >= cfg.opts.max_iter || !res.is_finite() {
                        break (
                            SolveStatus::Diverged {
                                reason: format!(
                                    "no convergence within {} hyperreduced iterations",
                                    cfg.opts.max_iter
                                ),
                            },
                            res,
                            ybar,
                        );
                    }
                    let t = Instant::now();
                    let (dy, warn) = lspg_least_squares(&kphi, &asm.g_m, cfg.lspg_paper_sign);
                    timings.linear_solve += t.elapsed().as_secs_f64();
                    rank_warning |= warn;
                    (res, dy)
                }
            };
            let _ = res;
            y += dy;
            iter += 1;
        };

        let converged = status.is_converged();
        let mut response = None;
        if converged && cfg.homogenize {
            let t = Instant::now();
            response = Some(hyper_homogenize(
                rve,
                hm,
                cid,
                phitilde.as_ref(),
                &u_buf,
                fbar,
            )?);
            timings.homogenization += t.elapsed().as_secs_f64();
        }
        if converged && cfg.record_full_states {
            states.push(Some(FullState {
                u: cfg.model.basis(cid) * &ybar_conv,
                fbar: *fbar,
            }));
        } else {
            states.push(None);
        }
        steps.push(HyperStepReport {
            fbar: *fbar,
            status,
            newton_iters: iter,
            res_hred: res_exit,
            cluster,
            chart_ridged,
            lspg_rank_warning: rank_warning,
            response,
        });

        if converged {
            y_prev = y;
            ybar_prev = ybar_conv;
            cluster_prev = cluster;
        } else {
            divergences += 1;
        }
    }

    Ok(HyperRun {
        steps,
        states,
        timings,
        divergences,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::{assemble, newton_solve, AssembleParts};
    use crate::galerkin::{reduced_homogenize, run_galerkin_path, ResidualMeta};
    use crate::hyper::stress_snapshots;
    use crate::material::{moduli_from_e_nu, stress_tangent, Variant};
    use crate::mesh::{build_rve_mesh, Inclusion, MeshSpec};
    use crate::reduce::{fit, PodBasis, ReduceMethod};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    // The same desk-scale fixtures as the Galerkin tests: one off-center
    // inclusion so the coarse mesh has a nontrivial fluctuation field.
    fn two_phase_rve(divisions: usize) -> Rve {
        let spec = MeshSpec {
            edge_length: 6.0,
            divisions,
            inclusions: vec![Inclusion {
                center: [2.0, 2.0, 2.0],
                radius: 1.5,
                material_id: 1,
            }],
            matrix_material_id: 0,
        };
        let mesh = build_rve_mesh(&spec).unwrap();
        let matrix = moduli_from_e_nu(1000.0, 0.2, Variant::Stabilized).unwrap();
        let inclusion = moduli_from_e_nu(3000.0, 0.2, Variant::Stabilized).unwrap();
        Rve::new(mesh, vec![matrix, inclusion]).unwrap()
    }

    fn homogeneous_rve(divisions: usize) -> Rve {
        let spec = MeshSpec {
            edge_length: 6.0,
            divisions,
            inclusions: vec![],
            matrix_material_id: 0,
        };
        let mesh = build_rve_mesh(&spec).unwrap();
        let matrix = moduli_from_e_nu(1000.0, 0.2, Variant::Stabilized).unwrap();
        Rve::new(mesh, vec![matrix]).unwrap()
    }

    fn load_at(t: f64) -> Matrix3<f64> {
        let mut f = Matrix3::identity();
        f[(0, 1)] += 0.05 * t;
        f[(0, 0)] += 0.03 * t;
        f[(2, 2)] -= 0.02 * t;
        f
    }

    fn random_orthonormal(r: &mut impl Rng, nrows: usize, ncols: usize) -> DMatrix<f64> {
        let m = DMatrix::from_fn(nrows, ncols, |_, _| r.random::<f64>() * 2.0 - 1.0);
        m.qr().q()
    }

    fn synthetic_residuals(r: &mut impl Rng, n_free: usize, cols: usize) -> ResidualSet {
        ResidualSet {
            g: DMatrix::from_fn(n_free, cols, |_, _| r.random::<f64>() * 2.0 - 1.0),
            meta: (0..cols)
                .map(|i| ResidualMeta {
                    path: 0,
                    step: i,
                    iter: 0,
                    converged: true,
                })
                .collect(),
        }
    }

    fn pod_model(psi: DMatrix<f64>) -> ReducedModel {
        let d = psi.ncols();
        ReducedModel::Pod(PodBasis {
            psi,
            singular_values: vec![1.0; d],
            rank: d,
        })
    }

    #[test]
    fn hand_toy_step_matches_hand_computation() {
        // left = [0.5 0.25], khat = [4; 2], g_m = (1, 3):
        // K_hred = 0.5*4 + 0.25*2 = 2.5, g_hred = 0.5 + 0.75 = 1.25,
        // dy = -1.25/2.5 = -0.5.
        let left = DMatrix::from_row_slice(1, 2, &[0.5, 0.25]);
        let khat = DMatrix::from_column_slice(2, 1, &[4.0, 2.0]);
        let g_m = DVector::from_column_slice(&[1.0, 3.0]);
        let dy = hyper_newton_step_deimlike(&left, &khat, &g_m, None).unwrap();
        assert_eq!(dy.len(), 1);
        assert!((dy[0] + 0.5).abs() < 1e-15, "dy = {}", dy[0]);

        let identity = DMatrix::identity(1, 1);
        let dy2 = hyper_newton_step_deimlike(&left, &khat, &g_m, Some(&identity)).unwrap();
        assert!((dy2[0] + 0.5).abs() < 1e-15);
    }

    #[test]
    fn zero_residual_gives_zero_step() {
        let mut r = ChaCha12Rng::seed_from_u64(90);
        let left = DMatrix::from_fn(3, 6, |_, _| r.random::<f64>());
        let khat = DMatrix::from_fn(6, 3, |_, _| r.random::<f64>() + 0.5);
        let g_m = DVector::zeros(6);
        let dy = hyper_newton_step_deimlike(&left, &khat, &g_m, None).unwrap();
        assert!(dy.amax() == 0.0 || dy.amax() < 1e-15);

        let step = hyper_newton_step_lspg(&khat, &g_m, None, false).unwrap();
        assert!(step.dy.amax() < 1e-14);
        assert!(!step.rank_warning);
    }

    #[test]
    fn lspg_square_system_equals_direct_solve() {
        let mut r = ChaCha12Rng::seed_from_u64(91);
        let khat = DMatrix::from_fn(4, 4, |i, j| {
            if i == j {
                3.0 + r.random::<f64>()
            } else {
                r.random::<f64>() - 0.5
            }
        });
        let g_m = DVector::from_fn(4, |_, _| r.random::<f64>() - 0.5);
        let step = hyper_newton_step_lspg(&khat, &g_m, None, false).unwrap();
        let direct = khat.clone().lu().solve(&(-&g_m)).unwrap();
        assert!((step.dy - direct).amax() < 1e-12);
    }

    #[test]
    fn lspg_consistent_overdetermined_recovers_exact_solution() {
        let mut r = ChaCha12Rng::seed_from_u64(92);
        let kphi = DMatrix::from_fn(10, 3, |_, _| r.random::<f64>() - 0.5);
        let dy_true = DVector::from_column_slice(&[0.7, -1.2, 0.4]);
        let g_m = -(&kphi * &dy_true);
        let step = hyper_newton_step_lspg(&kphi, &g_m, None, false).unwrap();
        assert!((step.dy - dy_true).amax() < 1e-12);
    }

    #[test]
    fn lspg_matches_normal_equation_oracle() {
        let mut r = ChaCha12Rng::seed_from_u64(93);
        let kphi = DMatrix::from_fn(12, 4, |_, _| r.random::<f64>() - 0.5);
        let g_m = DVector::from_fn(12, |_, _| r.random::<f64>() - 0.5);
        let step = hyper_newton_step_lspg(&kphi, &g_m, None, false).unwrap();
        let ata = kphi.transpose() * &kphi;
        let atb = kphi.transpose() * (-&g_m);
        let oracle = ata.lu().solve(&atb).unwrap();
        assert!((step.dy - oracle).amax() < 1e-9);
    }

    #[test]
    fn lspg_paper_sign_flips_the_step() {
        let mut r = ChaCha12Rng::seed_from_u64(94);
        let kphi = DMatrix::from_fn(8, 3, |_, _| r.random::<f64>() - 0.5);
        let g_m = DVector::from_fn(8, |_, _| r.random::<f64>() - 0.5);
        let newton = hyper_newton_step_lspg(&kphi, &g_m, None, false).unwrap();
        let paper = hyper_newton_step_lspg(&kphi, &g_m, None, true).unwrap();
        assert!((&newton.dy + &paper.dy).amax() < 1e-12);
    }

    #[test]
    fn lspg_rank_deficient_falls_back_to_minimum_norm() {
        let mut r = ChaCha12Rng::seed_from_u64(95);
        let col = DVector::from_fn(9, |_, _| r.random::<f64>() - 0.5);
        let mut kphi = DMatrix::zeros(9, 3);
        kphi.set_column(0, &col);
        kphi.set_column(1, &(2.0 * &col));
        kphi.set_column(2, &DVector::from_fn(9, |_, _| r.random::<f64>() - 0.5));
        let g_m = DVector::from_fn(9, |_, _| r.random::<f64>() - 0.5);
        let step = hyper_newton_step_lspg(&kphi, &g_m, None, false).unwrap();
        assert!(step.rank_warning);
        let oracle = lstsq_vec(&kphi, &(-&g_m), 1e-12);
        assert!((step.dy - oracle).amax() < 1e-10);
        // m >= d is enforced.
        assert!(hyper_newton_step_lspg(&kphi.transpose(), &DVector::zeros(3), None, false).is_err());
    }

    #[test]
    fn full_point_set_reproduces_the_galerkin_step() {
        // With m = D the selector is a permutation, the DEIM operator
        // collapses to it, and for full-row-rank snapshots the LEHM
        // operator does too, so both steps equal the Galerkin step.
        let rve = two_phase_rve(2);
        let n = rve.n_dofs();
        let mut r = ChaCha12Rng::seed_from_u64(96);
        let g_snap = DMatrix::from_fn(n, n + 4, |_, _| r.random::<f64>() * 2.0 - 1.0);
        let (indices, omega) = select_magic_indices(&g_snap, n).unwrap();
        let magic = magic_points(&rve, indices);
        assert_eq!(magic.dofs.len(), n);

        let phi = random_orthonormal(&mut r, n, 4);
        let state = FullState {
            u: DVector::from_fn(n, |_, _| 0.01 * (r.random::<f64>() - 0.5)),
            fbar: load_at(0.5),
        };
        let full = assemble(&rve, &state, AssembleParts::newton()).unwrap();
        let sys = crate::galerkin::ReducedSystem::project(&phi, &full.g, full.k.as_ref().unwrap());
        let dy_gal = sys
            .k_red
            .clone()
            .cholesky()
            .unwrap()
            .solve(&(-&sys.g_red));

        let phibar_im = magic.restrict_rows(&phi);
        let hyp = hyper_assemble(
            &rve,
            &state.u,
            &state.fbar,
            &magic,
            Some(&phibar_im),
            None,
            HyperParts {
                khat: true,
                ..Default::default()
            },
        )
        .unwrap();
        let khat = hyp.khat.as_ref().unwrap();

        let deim = deim_fit(&omega, &magic, &phi).unwrap();
        let dy_deim = hyper_newton_step_deimlike(&deim.left_factor, khat, &hyp.g_m, None).unwrap();
        let scale = dy_gal.amax();
        assert!(
            (&dy_deim - &dy_gal).amax() < 1e-10 * scale,
            "DEIM step differs by {:.3e}",
            (&dy_deim - &dy_gal).amax() / scale
        );

        let lehm = lehm_fit(&g_snap, &magic, &phi, 1e-16).unwrap();
        let dy_lehm = hyper_newton_step_lehm_check(&lehm.left_factor, khat, &hyp.g_m);
        assert!(
            (&dy_lehm - &dy_gal).amax() < 1e-10 * scale,
            "LEHM step differs by {:.3e}",
            (&dy_lehm - &dy_gal).amax() / scale
        );
    }

    fn hyper_newton_step_lehm_check(
        left: &DMatrix<f64>,
        khat: &DMatrix<f64>,
        g_m: &DVector<f64>,
    ) -> DVector<f64> {
        hyper_newton_step_deimlike(left, khat, g_m, None).unwrap()
    }

    #[test]
    fn full_domain_homogenization_matches_galerkin() {
        let rve = two_phase_rve(2);
        let n = rve.n_dofs();
        let mut r = ChaCha12Rng::seed_from_u64(97);
        let g_snap = DMatrix::from_fn(n, n + 4, |_, _| r.random::<f64>() * 2.0 - 1.0);
        let (indices, omega) = select_magic_indices(&g_snap, n).unwrap();
        let magic = magic_points(&rve, indices);
        assert_eq!(magic.elements.len(), rve.mesh.num_elements());

        let phi = random_orthonormal(&mut r, n, 4);
        let deim = deim_fit(&omega, &magic, &phi).unwrap();
        let xi = volumetric_xi(&rve, &magic);
        let sum_v: f64 = magic
            .elements
            .iter()
            .zip(&xi.xi)
            .map(|(_, w)| w * rve.mesh.volume / rve.mesh.num_elements() as f64)
            .sum();
        assert!((sum_v - 1.0).abs() < 1e-12, "uniform mesh: sum xi_e V_e = 1");

        let hm = HyperModel {
            method: HyperMethod::Deim,
            phibar_im: vec![magic.restrict_rows(&phi)],
            phibar_magic: vec![magic.restrict_magic_rows(&phi)],
            left: vec![deim.left_factor],
            magic,
            xi,
            lehm_condition: None,
        };

        let state = FullState {
            u: DVector::from_fn(n, |_, _| 0.01 * (r.random::<f64>() - 0.5)),
            fbar: load_at(0.7),
        };
        let hyper = hyper_homogenize(&rve, &hm, 0, None, &state.u, &state.fbar).unwrap();
        let galerkin = reduced_homogenize(&rve, &state, &phi).unwrap();

        let p_rel = (hyper.pbar - galerkin.pbar).norm() / galerkin.pbar.norm();
        let a_rel = (hyper.abar - galerkin.abar).norm() / galerkin.abar.norm();
        let s_rel = (&hyper.svec - &galerkin.svec).norm() / galerkin.svec.norm();
        assert!(p_rel < 1e-9, "stress differs by {p_rel:.3e}");
        assert!(a_rel < 1e-9, "tangent differs by {a_rel:.3e}");
        assert!(s_rel < 1e-9, "sensitivity differs by {s_rel:.3e}");
    }

    #[test]
    fn lspg_homogenization_satisfies_its_normal_equations() {
        let rve = two_phase_rve(2);
        let n = rve.n_dofs();
        let mut r = ChaCha12Rng::seed_from_u64(98);
        let g_snap = DMatrix::from_fn(n, n + 4, |_, _| r.random::<f64>() * 2.0 - 1.0);
        let (indices, _) = select_magic_indices(&g_snap, n).unwrap();
        let magic = magic_points(&rve, indices);
        let phi = random_orthonormal(&mut r, n, 4);
        let xi = volumetric_xi(&rve, &magic);
        let hm = HyperModel {
            method: HyperMethod::Lspg,
            phibar_im: vec![magic.restrict_rows(&phi)],
            phibar_magic: vec![magic.restrict_magic_rows(&phi)],
            left: Vec::new(),
            magic,
            xi,
            lehm_condition: None,
        };
        let state = FullState {
            u: DVector::from_fn(n, |_, _| 0.01 * (r.random::<f64>() - 0.5)),
            fbar: load_at(0.4),
        };
        let response = hyper_homogenize(&rve, &hm, 0, None, &state.u, &state.fbar).unwrap();

        let asm = hyper_assemble(
            &rve,
            &state.u,
            &state.fbar,
            &hm.magic,
            Some(&hm.phibar_im[0]),
            None,
            HyperParts {
                khat: true,
                l_m: true,
                ..Default::default()
            },
        )
        .unwrap();
        let kphi = asm.khat.unwrap();
        let l_m = asm.l_m.unwrap();
        let lhs = kphi.transpose() * &kphi * &response.svec;
        let rhs = kphi.transpose() * &l_m;
        assert!((lhs - &rhs).norm() < 1e-9 * rhs.norm());
    }

    #[test]
    fn homogeneous_rve_recovers_bulk_response() {
        // Uniform deformation is an exact equilibrium, the sensitivity
        // rows vanish, and the xi-weighted averages reproduce the bulk
        // stress and tangent through the whole hyper pipeline.
        let rve = homogeneous_rve(2);
        let n = rve.n_dofs();
        let mut r = ChaCha12Rng::seed_from_u64(99);
        let residuals = synthetic_residuals(&mut r, n, 12);
        let psi = random_orthonormal(&mut r, n, 3);
        let model = pod_model(psi);

        let fbars = [load_at(0.25), load_at(0.5), load_at(1.0)];
        let states: Vec<FullState> = fbars
            .iter()
            .map(|f| FullState {
                u: DVector::zeros(n),
                fbar: *f,
            })
            .collect();
        let refs: Vec<&FullState> = states.iter().collect();
        let stress = stress_snapshots(&rve, &refs).unwrap();

        let hm =
            build_hyper_model(&rve, &model, &residuals, &stress, HyperMethod::Deim, 6, 0.0).unwrap();
        assert!(hm.xi.residual < 1e-8);

        let rp = ReduceParams::new(ReduceMethod::Pod, 3, 7);
        let opts = NewtonOpts::default();
        let cfg = HyperRunConfig {
            rve: &rve,
            model: &model,
            rp: &rp,
            hyper: &hm,
            opts: &opts,
            lspg_paper_sign: false,
            record_full_states: false,
            homogenize: true,
        };
        let path = [load_at(0.3), load_at(0.8)];
        let run = run_hyper_rve(&cfg, &path).unwrap();
        assert_eq!(run.divergences, 0);

        for step in &run.steps {
            assert!(step.status.is_converged());
            assert_eq!(step.newton_iters, 0, "uniform state converges at once");
            let response = step.response.as_ref().unwrap();
            let bulk = stress_tangent(&rve.materials[0], &step.fbar).unwrap();
            let p_rel = (response.pbar - bulk.p).norm() / bulk.p.norm();
            let a_rel = (response.abar - bulk.a.to_voigt()).norm() / bulk.a.to_voigt().norm();
            assert!(p_rel < 1e-7, "stress off by {p_rel:.3e}");
            assert!(a_rel < 1e-6, "tangent off by {a_rel:.3e}");
        }
    }

    #[test]
    fn training_path_replay_lle_lehm_below_half_percent() {
        let rve = two_phase_rve(2);
        let n_steps = 8;
        let path: Vec<Matrix3<f64>> = (0..n_steps)
            .map(|i| load_at((i + 1) as f64 / n_steps as f64))
            .collect();

        let opts = NewtonOpts::default();
        let mut snaps = crate::reduce::SnapshotSet::new(rve.n_dofs());
        let mut fom_states = Vec::new();
        for (i, fbar) in path.iter().enumerate() {
            let sol = newton_solve(&rve, fbar, &opts).unwrap();
            assert!(sol.status.is_converged());
            snaps.push(&sol.state.u, *fbar, 0, i);
            fom_states.push(sol.state);
        }

        let mut rp = ReduceParams::new(ReduceMethod::Lle, 2, 11);
        rp.n_chart = 3;
        let model = fit(&snaps, &rp).unwrap();
        let galerkin = run_galerkin_path(&rve, &model, &rp, &path, 0, &opts, true).unwrap();
        assert_eq!(galerkin.divergences, 0);
        let residuals = galerkin.residuals.unwrap();

        let refs: Vec<&FullState> = fom_states.iter().collect();
        let stress = stress_snapshots(&rve, &refs).unwrap();
        let hm = build_hyper_model(
            &rve,
            &model,
            &residuals,
            &stress,
            HyperMethod::Lehm,
            10,
            0.0,
        )
        .unwrap();
        assert!(hm.lehm_condition.is_some());

        let cfg = HyperRunConfig {
            rve: &rve,
            model: &model,
            rp: &rp,
            hyper: &hm,
            opts: &opts,
            lspg_paper_sign: false,
            record_full_states: true,
            homogenize: false,
        };
        let run = run_hyper_rve(&cfg, &path).unwrap();
        assert_eq!(run.divergences, 0, "training replay must not diverge");

        let mut total = 0.0;
        for (state, fom) in run.states.iter().zip(&fom_states) {
            let u = &state.as_ref().unwrap().u;
            total += (u - &fom.u).norm() / fom.u.norm();
        }
        let mean = total / fom_states.len() as f64;
        assert!(
            mean < 5e-3,
            "mean displacement error {:.4}% exceeds 0.5%",
            100.0 * mean
        );
    }

    #[test]
    fn degenerate_dimensions_run_to_completion() {
        // d = s - 1 and m near the residual rank: a stress test for the
        // bookkeeping, not for accuracy. Every step must produce a report.
        let rve = two_phase_rve(2);
        let n_steps = 5;
        let path: Vec<Matrix3<f64>> = (0..n_steps)
            .map(|i| load_at((i + 1) as f64 / n_steps as f64))
            .collect();
        let opts = NewtonOpts::default();
        let mut snaps = crate::reduce::SnapshotSet::new(rve.n_dofs());
        let mut fom_states = Vec::new();
        for (i, fbar) in path.iter().enumerate() {
            let sol = newton_solve(&rve, fbar, &opts).unwrap();
            snaps.push(&sol.state.u, *fbar, 0, i);
            fom_states.push(sol.state);
        }

        for method in [ReduceMethod::Pod, ReduceMethod::Pm] {
            let mut rp = ReduceParams::new(method, n_steps - 1, 13);
            // s = 5 snapshots admit at most d + dtilde = 5 manifold axes.
            rp.d_tilde = 1;
            let model = fit(&snaps, &rp).unwrap();
            let galerkin = run_galerkin_path(&rve, &model, &rp, &path, 0, &opts, true).unwrap();
            let residuals = galerkin.residuals.unwrap();
            let refs: Vec<&FullState> = fom_states.iter().collect();
            let stress = stress_snapshots(&rve, &refs).unwrap();
            let m = 8.min(residuals.len());
            let hm = match build_hyper_model(
                &rve,
                &model,
                &residuals,
                &stress,
                HyperMethod::Lehm,
                m,
                0.0,
            ) {
                Ok(hm) => hm,
                Err(Error::InsufficientRank(_)) => continue,
                Err(e) => panic!("unexpected build failure: {e}"),
            };
            let cfg = HyperRunConfig {
                rve: &rve,
                model: &model,
                rp: &rp,
                hyper: &hm,
                opts: &opts,
                lspg_paper_sign: false,
                record_full_states: false,
                homogenize: false,
            };
            let run = run_hyper_rve(&cfg, &path).unwrap();
            assert_eq!(run.steps.len(), path.len());
        }
    }

    #[test]
    fn build_model_shapes_are_consistent_and_lspg_guards_m() {
        let rve = two_phase_rve(2);
        let n = rve.n_dofs();
        let mut r = ChaCha12Rng::seed_from_u64(100);
        let residuals = synthetic_residuals(&mut r, n, 15);
        let psi = random_orthonormal(&mut r, n, 4);
        let model = pod_model(psi);
        let states: Vec<FullState> = (0..3)
            .map(|i| FullState {
                u: DVector::from_fn(n, |_, _| 0.01 * (r.random::<f64>() - 0.5)),
                fbar: load_at(0.3 * (i + 1) as f64),
            })
            .collect();
        let refs: Vec<&FullState> = states.iter().collect();
        let stress = stress_snapshots(&rve, &refs).unwrap();

        let m = 7;
        let hm =
            build_hyper_model(&rve, &model, &residuals, &stress, HyperMethod::Lehm, m, 0.0).unwrap();
        assert_eq!(hm.left.len(), 1);
        assert_eq!(hm.left[0].shape(), (4, m));
        assert_eq!(hm.phibar_im[0].shape(), (hm.magic.dofs.len(), 4));
        assert_eq!(hm.phibar_magic[0].shape(), (m, 4));
        assert_eq!(hm.xi.elements, hm.magic.elements);
        assert!(hm.lehm_condition.unwrap() >= 1.0);

        let err = build_hyper_model(&rve, &model, &residuals, &stress, HyperMethod::Lspg, 3, 0.0);
        assert!(matches!(err, Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn newton_loop_allocates_nothing_of_full_order() {
        // Run the online driver under the counting allocator: the only
        // allocation of at least D doubles is the scatter buffer created
        // once before the path loop. Per-iteration objects are all of
        // reduced size on a reduced integration domain.
        let rve = two_phase_rve(4);
        let n = rve.n_dofs();
        let mut r = ChaCha12Rng::seed_from_u64(101);
        let psi = random_orthonormal(&mut r, n, 2);
        let model = pod_model(psi.clone());

        // Three magic DOFs on one periodic node class keep E_m and I_m
        // well below full size.
        let magic = magic_points(&rve, vec![30, 31, 32]);
        assert!(magic.elements.len() < rve.mesh.num_elements());
        assert!(magic.dofs.len() * 8 < n * 8);
        let g_snap = DMatrix::from_fn(n, 8, |_, _| r.random::<f64>() * 2.0 - 1.0);
        let lehm = lehm_fit(&g_snap, &magic, &psi, 0.0).unwrap();
        let xi = volumetric_xi(&rve, &magic);
        let hm = HyperModel {
            method: HyperMethod::Lehm,
            phibar_im: vec![magic.restrict_rows(&psi)],
            phibar_magic: vec![magic.restrict_magic_rows(&psi)],
            left: vec![lehm.left_factor],
            magic,
            xi,
            lehm_condition: Some(lehm.condition),
        };

        let rp = ReduceParams::new(ReduceMethod::Pod, 2, 17);
        // A tolerance below machine precision forces a fixed number of
        // genuine Newton iterations before the step is abandoned.
        let opts = NewtonOpts {
            tol_red: 1e-30,
            max_iter: 4,
            ..NewtonOpts::default()
        };
        let cfg = HyperRunConfig {
            rve: &rve,
            model: &model,
            rp: &rp,
            hyper: &hm,
            opts: &opts,
            lspg_paper_sign: false,
            record_full_states: false,
            homogenize: false,
        };
        let path = [load_at(0.1)];

        let (run, full_size_allocs) =
            crate::testalloc::audit(n * 8, || run_hyper_rve(&cfg, &path).unwrap());
        assert_eq!(run.steps.len(), 1);
        let iterates: usize = run.steps.iter().map(|s| s.newton_iters + 1).sum();
        assert!(iterates >= 3, "the loop body must actually run");
        assert!(
            full_size_allocs <= 1,
            "{full_size_allocs} full-order allocations; only the one-time scatter buffer is allowed"
        );
    }
}
