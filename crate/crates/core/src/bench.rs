//! Benchmark harness: random load paths, snapshot and validation
//! campaigns, error metrics, manifold diagnostics, d x m sweeps and
//! runtime breakdowns.
//!
//! A load path prescribes a macroscopic deformation history
//!
//! ```text
//! Fbar_k = I + k dlp N_LP + dls (N_LS,1 + ... + N_LS,k)
//! ```
//!
//! with one fixed unit-Frobenius direction `N_LP` per path and a fresh
//! unit-Frobenius perturbation `N_LS,k` per step, both sampled from
//! normalized standard-normal 3 x 3 matrices. A step whose determinant
//! is not positive redraws its perturbation until it is.
//!
//! Accuracy is the arithmetic mean of relative Euclidean errors
//! `|u_rom - u_fom| / |u_fom|` in percent, applied identically to the
//! fluctuation vectors and to the homogenized stresses. A single
//! diverged state makes the metric undefined and the divergence count is
//! reported instead, which is the "x" convention of robustness tables.
//!
//! Two diagnostics probe the solution manifold itself: the eigenvalue
//! decay of the snapshot Gram matrix `U^T U` (how linear the manifold
//! is) and the scale-dependent correlation dimension, the centered
//! log-log slope of the pair-count curve
//!
//! ```text
//! C(r) = 2 / (s (s - 1)) #{ i < j : |u_i - u_j| < r },
//! ```
//!
//! which plateaus near the intrinsic dimension at intermediate radii.
//!
//! The campaign driver solves the full-order model along every path
//! once, caches states and homogenized stresses, and reuses them across
//! all sweep cells; a cell trains one approximation space, fits one
//! hyperreduced model and replays every validation path. Cell failures
//! are recorded in the report and never abort the sweep.

use std::time::Instant;

use nalgebra::{DMatrix, DVector, Matrix3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fem::{homogenize, newton_solve_from, FullState, NewtonOpts, Rve, Timings};
use crate::galerkin::{run_galerkin_path, ResidualSet};
use crate::hyper::{
    build_hyper_model, stress_snapshots, HyperMethod, HyperModel, HyperRunConfig, StressSnapshots,
};
use crate::material::{moduli_from_e_nu, Variant};
use crate::mesh::{build_rve_mesh, Inclusion, MeshSpec};
use crate::reduce::{fit, ReduceMethod, ReduceParams, ReducedModel, SnapshotSet};

/// The standard two-phase benchmark cell: a 6 mm cube with two stiff
/// spherical inclusions (radius 1.5) at (2,2,2) and (4,4,4), matrix
/// E = 1000, inclusions E = 3000, nu = 0.2 for both.
pub fn standard_rve(divisions: usize) -> Result<Rve> {
    let spec = MeshSpec {
        edge_length: 6.0,
        divisions,
        inclusions: vec![
            Inclusion {
                center: [2.0, 2.0, 2.0],
                radius: 1.5,
                material_id: 1,
            },
            Inclusion {
                center: [4.0, 4.0, 4.0],
                radius: 1.5,
                material_id: 1,
            },
        ],
        matrix_material_id: 0,
    };
    let mesh = build_rve_mesh(&spec)?;
    let matrix = moduli_from_e_nu(1000.0, 0.2, Variant::Stabilized)?;
    let inclusion = moduli_from_e_nu(3000.0, 0.2, Variant::Stabilized)?;
    Rve::new(mesh, vec![matrix, inclusion])
}

/// One random load path: a fixed primary direction plus per-step
/// perturbation directions, all unit Frobenius norm.
#[derive(Debug, Clone)]
pub struct LoadPath {
    pub n_lp: Matrix3<f64>,
    pub step_dirs: Vec<Matrix3<f64>>,
    pub dlp: f64,
    pub dls: f64,
}

impl LoadPath {
    pub fn n_steps(&self) -> usize {
        self.step_dirs.len()
    }

    /// The realized macroscopic gradients, one per step (the reference
    /// state I is not included).
    pub fn fbar_sequence(&self) -> Vec<Matrix3<f64>> {
        let mut out = Vec::with_capacity(self.step_dirs.len());
        let mut f = Matrix3::identity();
        for dir in &self.step_dirs {
            f += self.dlp * self.n_lp + self.dls * dir;
            out.push(f);
        }
        out
    }
}

fn random_direction(rng: &mut impl Rng) -> Matrix3<f64> {
    let m = Matrix3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
    m / m.norm()
}

/// Samples `n_paths` load paths of `n_steps` steps. A step whose
/// gradient loses determinant positivity redraws its perturbation
/// direction; a step that cannot be rescued within 100 redraws fails the
/// generation (with `dls = 0` a redraw changes nothing, so a bad primary
/// ray fails outright).
pub fn gen_load_paths(
    seed: u64,
    n_paths: usize,
    n_steps: usize,
    dlp: f64,
    dls: f64,
) -> Result<Vec<LoadPath>> {
    if n_paths == 0 || n_steps == 0 {
        return Err(Error::InvalidConfig(
            "load path generation needs positive path and step counts".into(),
        ));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut paths = Vec::with_capacity(n_paths);
    for _ in 0..n_paths {
        let n_lp = random_direction(&mut rng);
        let mut step_dirs = Vec::with_capacity(n_steps);
        let mut f = Matrix3::identity();
        for _ in 0..n_steps {
            let mut accepted = false;
            for _ in 0..100 {
                let dir = random_direction(&mut rng);
                let cand = f + dlp * n_lp + dls * dir;
                if cand.determinant() > 0.0 {
                    f = cand;
                    step_dirs.push(dir);
                    accepted = true;
                    break;
                }
            }
            if !accepted {
                return Err(Error::PathSampling { attempts: 100 });
            }
        }
        paths.push(LoadPath {
            n_lp,
            step_dirs,
            dlp,
            dls,
        });
    }
    Ok(paths)
}

/// Accuracy of a solution list: either the mean relative error in
/// percent, or the number of diverged states when any entry is missing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Metric {
    Percent(f64),
    Diverged(usize),
}

fn metric_over<T, F>(rom: &[Option<T>], fom: &[T], norms: F) -> Result<Metric>
where
    F: Fn(&T, &T) -> Result<(f64, f64)>,
{
    if rom.len() != fom.len() {
        return Err(Error::Dimension(format!(
            "error metric got {} reduced and {} reference solutions",
            rom.len(),
            fom.len()
        )));
    }
    if rom.is_empty() {
        return Err(Error::InvalidConfig("error metric over empty lists".into()));
    }
    let diverged = rom.iter().filter(|r| r.is_none()).count();
    if diverged > 0 {
        return Ok(Metric::Diverged(diverged));
    }
    let mut total = 0.0;
    for (r, f) in rom.iter().zip(fom) {
        let (diff, reference) = norms(r.as_ref().expect("no divergence"), f)?;
        if reference == 0.0 {
            return Err(Error::InvalidConfig(
                "error metric reference with zero norm".into(),
            ));
        }
        total += diff / reference;
    }
    Ok(Metric::Percent(100.0 * total / fom.len() as f64))
}

/// Mean relative displacement error in percent over aligned solution
/// lists; `None` entries are diverged states and switch the metric to a
/// divergence count.
pub fn error_metric(rom: &[Option<DVector<f64>>], fom: &[DVector<f64>]) -> Result<Metric> {
    metric_over(rom, fom, |r, f| {
        if r.len() != f.len() {
            return Err(Error::Dimension(format!(
                "error metric entry sizes {} vs {}",
                r.len(),
                f.len()
            )));
        }
        Ok(((r - f).norm(), f.norm()))
    })
}

/// The same metric on homogenized stresses (Frobenius norms).
pub fn error_metric_stress(rom: &[Option<Matrix3<f64>>], fom: &[Matrix3<f64>]) -> Result<Metric> {
    metric_over(rom, fom, |r, f| Ok(((r - f).norm(), f.norm())))
}

/// Eigenvalues of the s x s snapshot Gram matrix `U^T U`, descending.
/// Their decay measures how well a linear space can span the data.
pub fn eig_decay(u: &DMatrix<f64>) -> Result<Vec<f64>> {
    if u.ncols() < 3 {
        return Err(Error::InvalidConfig(format!(
            "eigenvalue decay needs at least 3 snapshots, got {}",
            u.ncols()
        )));
    }
    let gram = u.transpose() * u;
    let mut eigs: Vec<f64> = gram.symmetric_eigenvalues().iter().copied().collect();
    eigs.sort_by(|a, b| b.partial_cmp(a).expect("finite eigenvalues"));
    Ok(eigs)
}

/// Pair-count curve and its log-log slope: the scale-dependent
/// correlation dimension of a snapshot cloud.
#[derive(Debug, Clone)]
pub struct CorrelationCurve {
    /// Kept (r, C(r)) samples; radii with an empty pair count are skipped.
    pub points: Vec<(f64, f64)>,
    /// Centered finite-difference slope of log C vs log r at the interior
    /// kept radii, as (r, slope).
    pub slopes: Vec<(f64, f64)>,
}

/// Estimates the correlation dimension of the column cloud of `u` on the
/// given radius grid.
pub fn correlation_dimension(u: &DMatrix<f64>, r_grid: &[f64]) -> Result<CorrelationCurve> {
    let s = u.ncols();
    if s < 3 {
        return Err(Error::InvalidConfig(format!(
            "correlation dimension needs at least 3 snapshots, got {s}"
        )));
    }
    if r_grid.iter().any(|&r| !(r > 0.0)) {
        return Err(Error::InvalidConfig(
            "correlation dimension radii must be positive".into(),
        ));
    }
    let mut dists = Vec::with_capacity(s * (s - 1) / 2);
    for i in 0..s {
        for j in (i + 1)..s {
            dists.push((u.column(i) - u.column(j)).norm());
        }
    }
    dists.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
    let total = dists.len() as f64;

    let mut points = Vec::new();
    for &r in r_grid {
        let count = dists.partition_point(|&d| d < r);
        if count > 0 {
            points.push((r, count as f64 / total));
        }
    }
    let mut slopes = Vec::new();
    for w in 1..points.len().saturating_sub(1) {
        let (r_lo, c_lo) = points[w - 1];
        let (r_mid, _) = points[w];
        let (r_hi, c_hi) = points[w + 1];
        let slope = (c_hi.ln() - c_lo.ln()) / (r_hi.ln() - r_lo.ln());
        slopes.push((r_mid, slope));
    }
    Ok(CorrelationCurve { points, slopes })
}

/// Full-order reference solutions of a path set: converged states, their
/// homogenized stresses, and the solve cost.
pub struct FomResult {
    /// Per path, per step.
    pub states: Vec<Vec<FullState>>,
    /// Per path, per step; empty inner vectors when homogenization was
    /// not requested.
    pub pbars: Vec<Vec<Matrix3<f64>>>,
    pub newton_iters: usize,
    /// Wall time of the Newton solves alone.
    pub solve_wall: f64,
    pub homog_wall: f64,
}

impl FomResult {
    pub fn n_states(&self) -> usize {
        self.states.iter().map(Vec::len).sum()
    }
}

/// Solves every path of the set with the full-order model, warm-starting
/// each step from the previous one. Paths run in parallel; results merge
/// in path order. A diverged reference solve is a hard error since every
/// downstream comparison depends on it.
pub fn run_fom_campaign(
    rve: &Rve,
    paths: &[LoadPath],
    opts: &NewtonOpts,
    with_pbar: bool,
) -> Result<FomResult> {
    type PathOut = (Vec<FullState>, Vec<Matrix3<f64>>, usize, f64, f64);
    let per_path: Vec<Result<PathOut>> = paths
        .par_iter()
        .enumerate()
        .map(|(pidx, path)| {
            let seq = path.fbar_sequence();
            let mut states = Vec::with_capacity(seq.len());
            let mut pbars = Vec::new();
            let mut iters = 0usize;
            let mut wall = 0.0f64;
            let mut homog_wall = 0.0f64;
            let mut u_prev = DVector::zeros(rve.n_dofs());
            let mut fbar_prev = Matrix3::identity();
            for (k, fbar) in seq.iter().enumerate() {
                let t = Instant::now();
                let sol = newton_solve_from(rve, &fbar_prev, &u_prev, fbar, opts)?;
                wall += t.elapsed().as_secs_f64();
                if !sol.status.is_converged() {
                    return Err(Error::InvalidConfig(format!(
                        "reference solve diverged on path {pidx}, step {}: {:?}",
                        k + 1,
                        sol.status
                    )));
                }
                iters += sol.trace.newton_iters;
                if with_pbar {
                    let t = Instant::now();
                    pbars.push(homogenize(rve, &sol.state)?.pbar);
                    homog_wall += t.elapsed().as_secs_f64();
                }
                u_prev = sol.state.u.clone();
                fbar_prev = *fbar;
                states.push(sol.state);
            }
            Ok((states, pbars, iters, wall, homog_wall))
        })
        .collect();

    let mut out = FomResult {
        states: Vec::with_capacity(paths.len()),
        pbars: Vec::with_capacity(paths.len()),
        newton_iters: 0,
        solve_wall: 0.0,
        homog_wall: 0.0,
    };
    for item in per_path {
        let (states, pbars, iters, wall, homog_wall) = item?;
        out.states.push(states);
        out.pbars.push(pbars);
        out.newton_iters += iters;
        out.solve_wall += wall;
        out.homog_wall += homog_wall;
    }
    Ok(out)
}

/// Shape of one benchmark campaign. The validation set contains the
/// training paths: the first `n_train_paths` of `n_val_paths` generated
/// paths feed the snapshot set, all of them feed validation.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct CampaignSpec {
    pub divisions: usize,
    pub seed: u64,
    pub n_train_paths: usize,
    pub n_val_paths: usize,
    pub n_steps: usize,
    pub dlp: f64,
    pub dls: f64,
}

impl Default for CampaignSpec {
    fn default() -> Self {
        CampaignSpec {
            divisions: 6,
            seed: 7,
            n_train_paths: 20,
            n_val_paths: 50,
            n_steps: 10,
            dlp: 0.03,
            dls: 0.015,
        }
    }
}

/// The cached full-order side of a campaign: paths, reference solutions,
/// the training snapshot set and training stress data. Everything every
/// sweep cell needs, computed once.
pub struct Campaign {
    pub rve: Rve,
    pub spec: CampaignSpec,
    pub paths: Vec<LoadPath>,
    pub fom: FomResult,
    pub snaps: SnapshotSet,
    pub stress: StressSnapshots,
    pub opts: NewtonOpts,
}

impl Campaign {
    /// Reference fluctuations over all validation paths, flattened in
    /// path-major order.
    pub fn fom_u_flat(&self) -> Vec<DVector<f64>> {
        self.fom
            .states
            .iter()
            .flat_map(|path| path.iter().map(|s| s.u.clone()))
            .collect()
    }

    /// Reference homogenized stresses, flattened in path-major order.
    pub fn fom_pbar_flat(&self) -> Vec<Matrix3<f64>> {
        self.fom.pbars.iter().flatten().copied().collect()
    }
}

/// Generates the paths, solves the full-order references and assembles
/// the training data of a campaign.
pub fn build_campaign(spec: &CampaignSpec, opts: &NewtonOpts) -> Result<Campaign> {
    if spec.n_train_paths == 0 || spec.n_train_paths > spec.n_val_paths {
        return Err(Error::InvalidConfig(format!(
            "campaign needs 0 < n_train_paths <= n_val_paths, got {} and {}",
            spec.n_train_paths, spec.n_val_paths
        )));
    }
    let rve = standard_rve(spec.divisions)?;
    let paths = gen_load_paths(spec.seed, spec.n_val_paths, spec.n_steps, spec.dlp, spec.dls)?;
    let fom = run_fom_campaign(&rve, &paths, opts, true)?;

    let mut snaps = SnapshotSet::new(rve.n_dofs());
    let mut train_states: Vec<&FullState> = Vec::new();
    for (p, path_states) in fom.states.iter().take(spec.n_train_paths).enumerate() {
        for (k, state) in path_states.iter().enumerate() {
            snaps.push(&state.u, state.fbar, p, k);
            train_states.push(state);
        }
    }
    let stress = stress_snapshots(&rve, &train_states)?;

    Ok(Campaign {
        rve,
        spec: *spec,
        paths,
        fom,
        snaps,
        stress,
        opts: *opts,
    })
}

/// One trained approximation space plus the residual snapshots its
/// Galerkin replay of the training paths produced.
pub struct TrainedRom {
    pub rp: ReduceParams,
    pub model: ReducedModel,
    pub residuals: ResidualSet,
    pub train_divergences: usize,
}

fn concat_residuals(parts: Vec<ResidualSet>, n_free: usize) -> ResidualSet {
    let cols: usize = parts.iter().map(|p| p.g.ncols()).sum();
    let mut g = DMatrix::zeros(n_free, cols);
    let mut meta = Vec::with_capacity(cols);
    let mut at = 0;
    for part in parts {
        g.columns_mut(at, part.g.ncols()).copy_from(&part.g);
        at += part.g.ncols();
        meta.extend(part.meta);
    }
    ResidualSet { g, meta }
}

/// Fits an approximation space on the campaign snapshots and records
/// residual iterates by replaying the training paths with the Galerkin
/// ROM.
pub fn train_rom(c: &Campaign, method: ReduceMethod, d: usize) -> Result<TrainedRom> {
    let rp = ReduceParams::new(method, d, c.spec.seed);
    let model = fit(&c.snaps, &rp)?;
    let runs: Vec<Result<(ResidualSet, usize)>> = c
        .paths
        .par_iter()
        .take(c.spec.n_train_paths)
        .enumerate()
        .map(|(p, path)| {
            let run = run_galerkin_path(&c.rve, &model, &rp, &path.fbar_sequence(), p, &c.opts, true)?;
            Ok((run.residuals.expect("recording requested"), run.divergences))
        })
        .collect();
    let mut parts = Vec::with_capacity(runs.len());
    let mut train_divergences = 0;
    for run in runs {
        let (residuals, divergences) = run?;
        parts.push(residuals);
        train_divergences += divergences;
    }
    Ok(TrainedRom {
        rp,
        model,
        residuals: concat_residuals(parts, c.rve.n_dofs()),
        train_divergences,
    })
}

/// Fits the hyperreduction of one sweep cell on a trained space.
pub fn train_hyper(
    c: &Campaign,
    rom: &TrainedRom,
    hyper: HyperMethod,
    m: usize,
    lehm_eps: f64,
) -> Result<HyperModel> {
    build_hyper_model(
        &c.rve,
        &rom.model,
        &rom.residuals,
        &c.stress,
        hyper,
        m,
        lehm_eps,
    )
}

/// Accuracy and cost of one hyperreduced model over the validation set.
#[derive(Debug, Clone, Serialize)]
pub struct ValidationResult {
    /// Mean displacement error in percent; `None` when any state diverged
    /// or full states were not recorded.
    pub mean_error_u: Option<f64>,
    /// Mean homogenized stress error in percent; `None` when any state
    /// diverged or homogenization was off.
    pub mean_error_p: Option<f64>,
    pub diverged: usize,
    pub newton_iters: usize,
    pub timings: Timings,
    /// Summed wall time of the online runs (tight around each path).
    pub wall: f64,
}

/// Online solve cost: everything except homogenization.
pub fn online_total(t: &Timings) -> f64 {
    t.assembly + t.linear_solve + t.chart + t.projection
}

/// Replays every validation path with the hyperreduced model and compares
/// against the cached references. `record` enables the full-state
/// reconstruction needed for displacement errors; `with_pbar` enables
/// per-step homogenization and stress errors.
pub fn validate_hyper(
    c: &Campaign,
    rom: &TrainedRom,
    hm: &HyperModel,
    record: bool,
    with_pbar: bool,
) -> Result<ValidationResult> {
    type PathOut = (Vec<Option<DVector<f64>>>, Vec<Option<Matrix3<f64>>>, usize, usize, Timings, f64);
    let per_path: Vec<Result<PathOut>> = c
        .paths
        .par_iter()
        .map(|path| {
            let cfg = HyperRunConfig {
                rve: &c.rve,
                model: &rom.model,
                rp: &rom.rp,
                hyper: hm,
                opts: &c.opts,
                lspg_paper_sign: false,
                record_full_states: record,
                homogenize: with_pbar,
            };
            let t = Instant::now();
            let run = crate::hyper::run_hyper_rve(&cfg, &path.fbar_sequence())?;
            let wall = t.elapsed().as_secs_f64();
            let u: Vec<Option<DVector<f64>>> = run
                .states
                .iter()
                .map(|s| s.as_ref().map(|st| st.u.clone()))
                .collect();
            let p: Vec<Option<Matrix3<f64>>> = run
                .steps
                .iter()
                .map(|s| s.response.as_ref().map(|r| r.pbar))
                .collect();
            let iters: usize = run.steps.iter().map(|s| s.newton_iters).sum();
            Ok((u, p, run.divergences, iters, run.timings, wall))
        })
        .collect();

    let mut rom_u = Vec::new();
    let mut rom_p = Vec::new();
    let mut diverged = 0;
    let mut newton_iters = 0;
    let mut timings = Timings::default();
    let mut wall = 0.0;
    for item in per_path {
        let (u, p, div, iters, t, w) = item?;
        rom_u.extend(u);
        rom_p.extend(p);
        diverged += div;
        newton_iters += iters;
        timings.add(&t);
        wall += w;
    }

    let mean_error_u = if record {
        match error_metric(&rom_u, &c.fom_u_flat())? {
            Metric::Percent(p) => Some(p),
            Metric::Diverged(_) => None,
        }
    } else {
        None
    };
    let mean_error_p = if with_pbar {
        match error_metric_stress(&rom_p, &c.fom_pbar_flat())? {
            Metric::Percent(p) => Some(p),
            Metric::Diverged(_) => None,
        }
    } else {
        None
    };
    Ok(ValidationResult {
        mean_error_u,
        mean_error_p,
        diverged,
        newton_iters,
        timings,
        wall,
    })
}

/// Grid of a d x m sweep.
#[derive(Debug, Clone)]
pub struct SweepGrid {
    pub methods: Vec<ReduceMethod>,
    pub hypers: Vec<HyperMethod>,
    pub ds: Vec<usize>,
    pub ms: Vec<usize>,
    pub lehm_eps: f64,
}

impl Default for SweepGrid {
    fn default() -> Self {
        SweepGrid {
            methods: vec![
                ReduceMethod::Pod,
                ReduceMethod::Lpod,
                ReduceMethod::Pm,
                ReduceMethod::Lle,
            ],
            hypers: vec![HyperMethod::Deim, HyperMethod::Lehm, HyperMethod::Lspg],
            ds: vec![9, 15, 30],
            ms: vec![50, 100],
            lehm_eps: 0.0,
        }
    }
}

/// One sweep cell. Diverged cells carry no error value; failed cells
/// carry the failure text instead of results.
#[derive(Debug, Clone, Serialize)]
pub struct SweepCell {
    pub method: ReduceMethod,
    pub hyper: HyperMethod,
    pub d: usize,
    pub m: usize,
    pub mean_error_u: Option<f64>,
    pub mean_error_p: Option<f64>,
    pub diverged: usize,
    pub newton_iters: usize,
    pub timings: Timings,
    pub wall: f64,
    pub failure: Option<String>,
}

/// The full sweep outcome, one cell per grid point in grid order.
#[derive(Debug, Clone, Serialize)]
pub struct SweepReport {
    pub cells: Vec<SweepCell>,
}

fn csv_field(s: &str) -> String {
    if s.contains(',') || s.contains('"') || s.contains('\n') {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn opt_pct(v: Option<f64>) -> String {
    v.map(|p| format!("{p:.6}")).unwrap_or_default()
}

impl SweepReport {
    /// One RFC-4180 row per cell; empty error fields mark diverged or
    /// failed cells.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "method,hyper,d,m,mean_error_u_percent,mean_error_p_percent,diverged,\
             newton_iters,assembly_s,linear_solve_s,chart_s,projection_s,\
             homogenization_s,online_s,total_s,wall_s,failure\n",
        );
        for c in &self.cells {
            let t = &c.timings;
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{}\n",
                c.method,
                c.hyper,
                c.d,
                c.m,
                opt_pct(c.mean_error_u),
                opt_pct(c.mean_error_p),
                c.diverged,
                c.newton_iters,
                t.assembly,
                t.linear_solve,
                t.chart,
                t.projection,
                t.homogenization,
                online_total(t),
                t.total(),
                c.wall,
                csv_field(c.failure.as_deref().unwrap_or("")),
            ));
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map_err(|e| Error::InvalidConfig(format!("sweep report serialization: {e}")))
    }

    /// Plot-ready accuracy vs cost points: online runtime relative to the
    /// full-order solve of the same validation set, for every cell with a
    /// defined error.
    pub fn pareto_csv(&self, fom_solve_wall: f64) -> String {
        let mut out = String::from("method,hyper,d,m,rel_runtime,mean_error_u_percent\n");
        for c in &self.cells {
            if let (Some(err), None) = (c.mean_error_u, &c.failure) {
                out.push_str(&format!(
                    "{},{},{},{},{:.6e},{err:.6}\n",
                    c.method,
                    c.hyper,
                    c.d,
                    c.m,
                    online_total(&c.timings) / fom_solve_wall,
                ));
            }
        }
        out
    }
}

/// Runs the whole grid against one campaign. Training is shared across
/// the (hyper, m) cells of each (method, d); any cell-level failure is
/// recorded in the report and the sweep continues.
pub fn sweep(c: &Campaign, grid: &SweepGrid) -> SweepReport {
    let mut cells = Vec::new();
    for &method in &grid.methods {
        for &d in &grid.ds {
            let rom = train_rom(c, method, d);
            for &hyper in &grid.hypers {
                for &m in &grid.ms {
                    let cell = match &rom {
                        Ok(rom) => run_cell(c, rom, method, hyper, d, m, grid.lehm_eps),
                        Err(e) => failed_cell(method, hyper, d, m, format!("training: {e}")),
                    };
                    cells.push(cell);
                }
            }
        }
    }
    SweepReport { cells }
}

fn failed_cell(
    method: ReduceMethod,
    hyper: HyperMethod,
    d: usize,
    m: usize,
    failure: String,
) -> SweepCell {
    SweepCell {
        method,
        hyper,
        d,
        m,
        mean_error_u: None,
        mean_error_p: None,
        diverged: 0,
        newton_iters: 0,
        timings: Timings::default(),
        wall: 0.0,
        failure: Some(failure),
    }
}

fn run_cell(
    c: &Campaign,
    rom: &TrainedRom,
    method: ReduceMethod,
    hyper: HyperMethod,
    d: usize,
    m: usize,
    lehm_eps: f64,
) -> SweepCell {
    let outcome = train_hyper(c, rom, hyper, m, lehm_eps)
        .and_then(|hm| validate_hyper(c, rom, &hm, true, true));
    match outcome {
        Ok(v) => SweepCell {
            method,
            hyper,
            d,
            m,
            mean_error_u: v.mean_error_u,
            mean_error_p: v.mean_error_p,
            diverged: v.diverged,
            newton_iters: v.newton_iters,
            timings: v.timings,
            wall: v.wall,
            failure: None,
        },
        Err(e) => failed_cell(method, hyper, d, m, e.to_string()),
    }
}

/// Cost measurements of one mesh resolution at fixed reduced dimensions.
#[derive(Debug, Clone, Serialize)]
pub struct ComplexityPoint {
    pub divisions: usize,
    pub n_free: usize,
    pub n_elements: usize,
    /// Elements of the reduced integration domain.
    pub e_m: usize,
    /// DOFs of the reduced integration domain.
    pub i_m: usize,
    pub fom_wall: f64,
    pub fom_iters: usize,
    pub hyper_wall: f64,
    pub hyper_iters: usize,
}

impl ComplexityPoint {
    pub fn fom_per_iter(&self) -> f64 {
        self.fom_wall / self.fom_iters.max(1) as f64
    }

    pub fn hyper_per_iter(&self) -> f64 {
        self.hyper_wall / self.hyper_iters.max(1) as f64
    }
}

/// Measures full-order and hyperreduced per-iteration cost at fixed
/// (d, m) across mesh resolutions: the online cost should stay flat
/// while the full-order cost scales with the mesh. The first online
/// pass is a discarded warm-up.
#[allow(clippy::too_many_arguments)]
pub fn complexity_scan(
    divisions: &[usize],
    method: ReduceMethod,
    hyper: HyperMethod,
    d: usize,
    m: usize,
    n_paths: usize,
    n_steps: usize,
    seed: u64,
    opts: &NewtonOpts,
) -> Result<Vec<ComplexityPoint>> {
    let mut out = Vec::with_capacity(divisions.len());
    for &dv in divisions {
        let spec = CampaignSpec {
            divisions: dv,
            seed,
            n_train_paths: n_paths,
            n_val_paths: n_paths,
            n_steps,
            dlp: 0.03,
            dls: 0.015,
        };
        let c = build_campaign(&spec, opts)?;
        let rom = train_rom(&c, method, d)?;
        let hm = train_hyper(&c, &rom, hyper, m, 0.0)?;
        let _warmup = validate_hyper(&c, &rom, &hm, false, false)?;
        let v = validate_hyper(&c, &rom, &hm, false, false)?;
        out.push(ComplexityPoint {
            divisions: dv,
            n_free: c.rve.n_dofs(),
            n_elements: c.rve.mesh.num_elements(),
            e_m: hm.magic.elements.len(),
            i_m: hm.magic.dofs.len(),
            fom_wall: c.fom.solve_wall,
            fom_iters: c.fom.newton_iters,
            hyper_wall: online_total(&v.timings),
            hyper_iters: v.newton_iters,
        });
    }
    Ok(out)
}
