//! Reduced Newton solves and Galerkin-reduced homogenization.
//!
//! The full-order residual and stiffness are projected onto the step's
//! approximation space,
//!
//! ```text
//! g_red = phi^T g,    K_red = phi^T K phi,    K_red dy = -g_red
//! ```
//!
//! with `phi` the tangent of the active reconstruction: the POD basis, the
//! selected local POD basis, the polynomial-manifold tangent (refreshed
//! every Newton iteration), or the frozen per-step LLE chart. Convergence
//! is declared on the reduced residual `max|g_red| <= tol_red`; the full
//! residual `max|g|` is recorded alongside.
//!
//! The module also hosts the residual recorder feeding hyperreduction: the
//! gathered free-DOF residual of every iterate, including iterate 0 of each
//! load step and the converged iterate, with path/step/iteration metadata.

use std::time::Instant;

use nalgebra::{DMatrix, DVector, Matrix3};
use sprs::CsMat;

use crate::error::{Error, Result};
use crate::fem::sparse::mul_dense;
use crate::fem::{
    assemble, AssembleParts, Assembled, FullState, HomogenizedResponse, NewtonOpts, Rve,
    SolveStatus, Timings,
};
use crate::reduce::{embed_init, local_chart, pm_tangent, PmModel, ReduceParams, ReducedModel};

/// One projected Newton system.
pub struct ReducedSystem {
    pub g_red: DVector<f64>,
    pub k_red: DMatrix<f64>,
}

impl ReducedSystem {
    /// Projects an assembled full-order system onto the columns of `phi`.
    pub fn project(phi: &DMatrix<f64>, g: &DVector<f64>, k: &CsMat<f64>) -> Self {
        let kphi = mul_dense(k, phi);
        ReducedSystem {
            g_red: phi.transpose() * g,
            k_red: phi.transpose() * kphi,
        }
    }
}

/// Metadata of one recorded residual column.
#[derive(Debug, Clone, Copy)]
pub struct ResidualMeta {
    pub path: usize,
    pub step: usize,
    pub iter: usize,
    pub converged: bool,
}

/// Residual snapshots gathered across reduced solves, including
/// non-converged iterates; the training matrix for hyperreduction.
pub struct ResidualSet {
    /// n_free x s_g residual columns in recording order.
    pub g: DMatrix<f64>,
    pub meta: Vec<ResidualMeta>,
}

impl ResidualSet {
    pub fn len(&self) -> usize {
        self.meta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meta.is_empty()
    }
}

/// Append-only residual collector for one or more reduced runs.
pub struct ResidualRecorder {
    cols: Vec<DVector<f64>>,
    meta: Vec<ResidualMeta>,
    path: usize,
    step: usize,
}

impl ResidualRecorder {
    pub fn new() -> Self {
        ResidualRecorder {
            cols: Vec::new(),
            meta: Vec::new(),
            path: 0,
            step: 0,
        }
    }

    /// Sets the (path, step) tag for subsequently recorded iterates.
    pub fn begin_step(&mut self, path: usize, step: usize) {
        self.path = path;
        self.step = step;
    }

    fn push(&mut self, g: &DVector<f64>, iter: usize) {
        self.cols.push(g.clone());
        self.meta.push(ResidualMeta {
            path: self.path,
            step: self.step,
            iter,
            converged: false,
        });
    }

    fn mark_converged(&mut self) {
        if let Some(last) = self.meta.last_mut() {
            last.converged = true;
        }
    }

    pub fn finish(self, n_free: usize) -> ResidualSet {
        let mut g = DMatrix::zeros(n_free, self.cols.len());
        for (j, col) in self.cols.iter().enumerate() {
            g.set_column(j, col);
        }
        ResidualSet { g, meta: self.meta }
    }
}

impl Default for ResidualRecorder {
    fn default() -> Self {
        Self::new()
    }
}

/// The reconstruction in force for one load step.
pub enum StepBasis<'m> {
    /// `u = phi y + offset`: POD, a selected local POD basis, or a frozen
    /// LLE chart materialized in full space.
    Affine {
        phi: DMatrix<f64>,
        offset: DVector<f64>,
    },
    /// The quadratic manifold; its tangent is refreshed every iteration.
    Manifold(&'m PmModel),
}

impl StepBasis<'_> {
    pub fn dim(&self) -> usize {
        match self {
            StepBasis::Affine { phi, .. } => phi.ncols(),
            StepBasis::Manifold(m) => m.d(),
        }
    }

    pub fn reconstruct(&self, y: &DVector<f64>) -> DVector<f64> {
        match self {
            StepBasis::Affine { phi, offset } => phi * y + offset,
            StepBasis::Manifold(m) => m.decode(y),
        }
    }

    /// Full-space tangent at `y`.
    pub fn tangent(&self, y: &DVector<f64>) -> DMatrix<f64> {
        match self {
            StepBasis::Affine { phi, .. } => phi.clone(),
            StepBasis::Manifold(m) => &m.vfull * pm_tangent(m, y),
        }
    }

    fn refreshes_tangent(&self) -> bool {
        matches!(self, StepBasis::Manifold(_))
    }
}

/// Result of one reduced Newton solve.
pub struct ReducedSolve {
    pub y: DVector<f64>,
    pub state: FullState,
    pub status: SolveStatus,
    pub newton_iters: usize,
    /// `max|g_red|` at the last iterate.
    pub res_red: f64,
    /// `max|g|` at the last iterate.
    pub res_full: f64,
    pub timings: Timings,
}

/// Reduced Newton iteration on an explicit assembler, the seam shared by
/// the finite element path and the algebra-level tests.
pub(crate) fn reduced_newton_core<F>(
    sys: &mut F,
    basis: &StepBasis,
    y0: &DVector<f64>,
    fbar: Matrix3<f64>,
    opts: &NewtonOpts,
    mut recorder: Option<&mut ResidualRecorder>,
) -> Result<ReducedSolve>
where
    F: FnMut(&FullState) -> Result<(DVector<f64>, CsMat<f64>)>,
{
    let mut y = y0.clone();
    let mut timings = Timings::default();
    let mut phi = basis.tangent(&y);

    let mut iter = 0;
    loop {
        let t = Instant::now();
        let u = basis.reconstruct(&y);
        timings.projection += t.elapsed().as_secs_f64();
        let state = FullState { u, fbar };

        let t = Instant::now();
        let assembled = match sys(&state) {
            Ok(pair) => pair,
            Err(Error::InvertedElement { element, gauss, det_f }) => {
                timings.assembly += t.elapsed().as_secs_f64();
                return Ok(ReducedSolve {
                    y,
                    state,
                    status: SolveStatus::Diverged {
                        reason: format!(
                            "inverted element {element} at gauss point {gauss} (det F = {det_f:.3e})"
                        ),
                    },
                    newton_iters: iter,
                    res_red: f64::INFINITY,
                    res_full: f64::INFINITY,
                    timings,
                });
            }
            Err(e) => return Err(e),
        };
        let (g, k) = assembled;
        timings.assembly += t.elapsed().as_secs_f64();

        if let Some(rec) = recorder.as_deref_mut() {
            rec.push(&g, iter);
        }

        let t = Instant::now();
        let g_red = phi.transpose() * &g;
        timings.projection += t.elapsed().as_secs_f64();
        let res_red = g_red.amax();
        let res_full = g.amax();

        if res_red <= opts.tol_red {
            if let Some(rec) = recorder.as_deref_mut() {
                rec.mark_converged();
            }
            return Ok(ReducedSolve {
                y,
                state,
                status: SolveStatus::Converged,
                newton_iters: iter,
                res_red,
                res_full,
                timings,
            });
        }
        if iter >= opts.max_iter || !res_red.is_finite() {
            return Ok(ReducedSolve {
                y,
                state,
                status: SolveStatus::Diverged {
                    reason: format!("no convergence within {} reduced iterations", opts.max_iter),
                },
                newton_iters: iter,
                res_red,
                res_full,
                timings,
            });
        }

        let t = Instant::now();
        let kphi = mul_dense(&k, &phi);
        let k_red = phi.transpose() * &kphi;
        timings.projection += t.elapsed().as_secs_f64();

        let t = Instant::now();
        let rhs = -&g_red;
        let dy = match k_red.clone().cholesky() {
            Some(ch) => ch.solve(&rhs),
            None => match k_red.lu().solve(&rhs) {
                Some(x) => x,
                None => {
                    timings.linear_solve += t.elapsed().as_secs_f64();
                    return Ok(ReducedSolve {
                        y,
                        state,
                        status: SolveStatus::Diverged {
                            reason: "singular reduced stiffness".into(),
                        },
                        newton_iters: iter,
                        res_red,
                        res_full,
                        timings,
                    });
                }
            },
        };
        timings.linear_solve += t.elapsed().as_secs_f64();

        y += dy;
        if basis.refreshes_tangent() {
            phi = basis.tangent(&y);
        }
        iter += 1;
    }
}

/// Reduced Newton solve of the RVE equilibrium at a fixed macroscopic
/// deformation, on the given step basis.
pub fn reduced_newton(
    rve: &Rve,
    basis: &StepBasis,
    y0: &DVector<f64>,
    fbar: Matrix3<f64>,
    opts: &NewtonOpts,
    recorder: Option<&mut ResidualRecorder>,
) -> Result<ReducedSolve> {
    let mut assembler = |state: &FullState| -> Result<(DVector<f64>, CsMat<f64>)> {
        let asm = assemble(rve, state, AssembleParts::newton())?;
        let k = asm
            .k
            .ok_or_else(|| Error::Dimension("newton assembly must produce stiffness".into()))?;
        Ok((asm.g, k))
    };
    reduced_newton_core(&mut assembler, basis, y0, fbar, opts, recorder)
}

/// Galerkin-reduced homogenization at a converged reduced state:
/// `K_red S_red = phi^T L`, then the tangent correction happens entirely in
/// the reduced space.
pub fn reduced_homogenize(
    rve: &Rve,
    state: &FullState,
    phi: &DMatrix<f64>,
) -> Result<HomogenizedResponse> {
    let asm = assemble(rve, state, AssembleParts::homogenization())?;
    reduced_homogenize_with(rve, &asm, phi)
}

/// Variant reusing an already assembled system.
pub fn reduced_homogenize_with(
    rve: &Rve,
    asm: &Assembled,
    phi: &DMatrix<f64>,
) -> Result<HomogenizedResponse> {
    let vol = rve.mesh.volume;
    let k = asm
        .k
        .as_ref()
        .ok_or_else(|| Error::Dimension("homogenization needs stiffness".into()))?;
    let l = asm
        .l
        .as_ref()
        .ok_or_else(|| Error::Dimension("homogenization needs sensitivity columns".into()))?;
    let p_vol = asm
        .p_vol
        .ok_or_else(|| Error::Dimension("homogenization needs volume averages".into()))?;
    let a_vol = asm
        .a_vol
        .ok_or_else(|| Error::Dimension("homogenization needs volume averages".into()))?;

    let l_red = phi.transpose() * l;
    let k_red = phi.transpose() * mul_dense(k, phi);
    let s_red = match k_red.clone().cholesky() {
        Some(ch) => ch.solve(&l_red),
        None => k_red
            .lu()
            .solve(&l_red)
            .ok_or_else(|| Error::Singular("singular reduced stiffness in homogenization".into()))?,
    };

    let pbar = p_vol / vol;
    let correction = l_red.transpose() * &s_red / vol;
    let mut abar = a_vol / vol;
    for i in 0..9 {
        for j in 0..9 {
            abar[(i, j)] -= correction[(i, j)];
        }
    }
    Ok(HomogenizedResponse {
        pbar,
        abar,
        svec: s_red,
    })
}

/// Per-step outcome of a reduced load-path replay.
pub struct StepReport {
    pub fbar: Matrix3<f64>,
    pub status: SolveStatus,
    pub newton_iters: usize,
    pub res_red: f64,
    pub res_full: f64,
    /// Active local POD cluster, when applicable.
    pub cluster: Option<usize>,
    /// Whether the step's chart needed a ridge.
    pub chart_ridged: bool,
}

/// A reduced solve over a full load path.
pub struct GalerkinRun {
    pub steps: Vec<StepReport>,
    /// Converged state per step; `None` where the step diverged.
    pub states: Vec<Option<FullState>>,
    pub residuals: Option<ResidualSet>,
    pub timings: Timings,
    pub divergences: usize,
}

/// Replays a load path with the fitted model, handling per-step chart
/// construction (LLE), cluster selection and coordinate carry-over (local
/// POD), and warm starts. A diverged step keeps the last converged state
/// and the path continues.
pub fn run_galerkin_path(
    rve: &Rve,
    model: &ReducedModel,
    rp: &ReduceParams,
    path: &[Matrix3<f64>],
    path_id: usize,
    opts: &NewtonOpts,
    record: bool,
) -> Result<GalerkinRun> {
    let n_free = rve.n_dofs();
    let d = model.dim();
    let mut recorder = if record { Some(ResidualRecorder::new()) } else { None };

    let mut steps = Vec::with_capacity(path.len());
    let mut states: Vec<Option<FullState>> = Vec::with_capacity(path.len());
    let mut timings = Timings::default();
    let mut divergences = 0;

    let mut u_prev = DVector::zeros(n_free);
    let mut y_prev = DVector::zeros(d);
    let mut cluster_prev: Option<usize> = None;

    for (step_id, fbar) in path.iter().enumerate() {
        if let Some(rec) = recorder.as_mut() {
            rec.begin_step(path_id, step_id);
        }

        let t_chart = Instant::now();
        let mut chart_ridged = false;
        let mut cluster = None;
        let (basis, y0) = match model {
            ReducedModel::Pod(b) => (
                StepBasis::Affine {
                    phi: b.psi.clone(),
                    offset: DVector::zeros(n_free),
                },
                y_prev.clone(),
            ),
            ReducedModel::Lpod(m) => {
                let c = m.select(&u_prev);
                let y0 = match cluster_prev {
                    Some(prev) => m.carry(&y_prev, prev, c),
                    None => y_prev.clone(),
                };
                cluster = Some(c);
                (
                    StepBasis::Affine {
                        phi: m.bases[c].psi.clone(),
                        offset: DVector::zeros(n_free),
                    },
                    y0,
                )
            }
            ReducedModel::Pm(m) => (StepBasis::Manifold(m), y_prev.clone()),
            ReducedModel::Lle(m) => {
                let chart = local_chart(m, fbar, rp.resolved_n_chart(m.y.ncols()))?;
                chart_ridged = chart.ridged;
                let ybar_prev = m.phibar.transpose() * &u_prev;
                let y0 = embed_init(&chart, &ybar_prev)?;
                (
                    StepBasis::Affine {
                        phi: chart.full_phi(&m.phibar),
                        offset: chart.full_u0(&m.phibar),
                    },
                    y0,
                )
            }
        };
        timings.chart += t_chart.elapsed().as_secs_f64();

        let solve = reduced_newton(rve, &basis, &y0, *fbar, opts, recorder.as_mut())?;
        timings.add(&solve.timings);

        steps.push(StepReport {
            fbar: *fbar,
            status: solve.status.clone(),
            newton_iters: solve.newton_iters,
            res_red: solve.res_red,
            res_full: solve.res_full,
            cluster,
            chart_ridged,
        });

        if solve.status.is_converged() {
            u_prev = solve.state.u.clone();
            y_prev = solve.y.clone();
            cluster_prev = cluster;
            states.push(Some(solve.state));
        } else {
            divergences += 1;
            states.push(None);
        }
    }

    Ok(GalerkinRun {
        steps,
        states,
        residuals: recorder.map(|r| r.finish(n_free)),
        timings,
        divergences,
    })
}
