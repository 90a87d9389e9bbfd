//! Implementations of the pipeline subcommands.
//!
//! The pipeline runs as a chain of persisted stages under one output
//! directory:
//!
//! ```text
//! mesh -> fom run -> train reduce -> rom run --galerkin --record-residuals
//!      -> train hyper -> rom run --hyper
//! ```
//!
//! with `sweep` and `diag` branching off the fom stage and `verify`
//! re-checking everything. Each stage records the manifest hash of its
//! inputs, echoes its resolved configuration and persists deterministic
//! artifacts; see the `artifact` module for the layout rules.
//!
//! Fitted models are persisted through their defining matrices (bases,
//! magic points, quadrature weights). Downstream stages refit the model
//! deterministically from the persisted snapshots and require bitwise
//! agreement with the stored blocks, so a stale or edited stage cannot be
//! consumed silently.

use std::path::PathBuf;
use std::time::Instant;

use nalgebra::{DMatrix, DVector, Matrix3};
use rayon::prelude::*;
use serde_json::json;

use hyperrom::bench::{
    correlation_dimension, eig_decay, error_metric, error_metric_stress, gen_load_paths, sweep,
    Campaign, CampaignSpec, FomResult, Metric, SweepGrid,
};
use hyperrom::fem::{newton_solve, FullState, Rve, SolveStatus, Timings};
use hyperrom::galerkin::{run_galerkin_path, ResidualMeta, ResidualSet};
use hyperrom::hyper::{
    build_hyper_model, run_hyper_rve, stress_snapshots, HyperModel, HyperRunConfig,
    StressSnapshots,
};
use hyperrom::mesh::build_rve_mesh;
use hyperrom::reduce::{fit, ReduceParams, ReducedModel, SnapshotSet};
use hyperrom::store::{self, Manifest};

use crate::artifact::{
    add_json_file, add_text_file, bits_equal, fresh_stage_dir, index_column, inherited_config,
    input_of, load_fom, matrix3_columns, require_stage, stage_dir, stage_hint, write_json,
    LoadedFom, STAGES,
};
use crate::config::{effective_seed, RunConfig};
use crate::CliError;

/// Shared invocation context: resolved current configuration plus the
/// global flag values that outrank it.
pub struct Ctx {
    pub cfg: RunConfig,
    pub seed_flag: Option<u64>,
    pub out: PathBuf,
    pub threads: usize,
}

/// Takes the shared sections of a downstream stage from the upstream echo.
fn inherit_shared(mut current: RunConfig, upstream: &RunConfig) -> RunConfig {
    current.mesh = upstream.mesh.clone();
    current.phases = upstream.phases.clone();
    current.paths = upstream.paths;
    current.solver = upstream.solver;
    current.seed = upstream.seed;
    current
}

fn build_rve(cfg: &RunConfig) -> anyhow::Result<Rve> {
    let mesh = build_rve_mesh(&cfg.mesh_spec())?;
    Ok(Rve::new(mesh, cfg.materials()?)?)
}

fn has_block(manifest: &Manifest, name: &str) -> bool {
    let file = format!("{name}.hrmb");
    manifest.files.iter().any(|f| f.name == file)
}

fn metric_value(metric: &Metric) -> (Option<f64>, usize) {
    match metric {
        Metric::Percent(p) => (Some(*p), 0),
        Metric::Diverged(n) => (None, *n),
    }
}

/// Percent error of a state sequence against its reference, `None` when the
/// metric is undefined (divergence or a degenerate reference).
fn safe_metric(rom: &[Option<DVector<f64>>], refs: &[DVector<f64>]) -> Option<f64> {
    error_metric(rom, refs).ok().and_then(|m| metric_value(&m).0)
}

fn safe_metric_stress(rom: &[Option<Matrix3<f64>>], refs: &[Matrix3<f64>]) -> Option<f64> {
    error_metric_stress(rom, refs).ok().and_then(|m| metric_value(&m).0)
}

fn json_opt(v: Option<f64>) -> serde_json::Value {
    match v {
        Some(x) => json!(x),
        None => serde_json::Value::Null,
    }
}

fn csv_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn csv_escape(s: &str) -> String {
    if s.contains(',') || s.contains('"') || s.contains('\n') {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

// ---------------------------------------------------------------------------
// mesh
// ---------------------------------------------------------------------------

pub fn cmd_mesh(ctx: &Ctx, divisions: Option<usize>, edge_length: Option<f64>) -> anyhow::Result<()> {
    let mut cfg = ctx.cfg.clone();
    if let Some(n) = divisions {
        cfg.mesh.divisions = n;
    }
    if let Some(e) = edge_length {
        cfg.mesh.edge_length = e;
    }
    cfg.seed = effective_seed(cfg.seed, ctx.seed_flag)?;

    let rve = build_rve(&cfg)?;
    let n_elements = rve.mesh.num_elements();
    let mut centroids = DMatrix::zeros(n_elements, 3);
    for e in 0..n_elements {
        let c = rve.mesh.element_centroid(e);
        for ax in 0..3 {
            centroids[(e, ax)] = c[ax];
        }
    }
    let n_inclusion = rve
        .mesh
        .element_material
        .iter()
        .filter(|&&m| m != cfg.mesh.matrix_material_id)
        .count();

    let dir = fresh_stage_dir(&ctx.out, "mesh")?;
    let mut manifest = Manifest::new("mesh", cfg.seed, ctx.threads, cfg.echo());
    manifest.add_block(&dir, "centroids", &centroids)?;
    manifest.notes = json!({
        "divisions": cfg.mesh.divisions,
        "n_nodes": rve.mesh.num_nodes(),
        "n_elements": n_elements,
        "n_inclusion_elements": n_inclusion,
        "n_free_dofs": rve.n_dofs(),
        "volume": rve.mesh.integrated_volume(),
    });
    store::write_manifest(&dir, &manifest)?;

    println!(
        "mesh: {} elements ({} inclusion-tagged), {} free dofs -> {}",
        n_elements,
        n_inclusion,
        rve.n_dofs(),
        dir.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// fom run
// ---------------------------------------------------------------------------

pub struct FomOverrides {
    pub paths: Option<usize>,
    pub train_paths: Option<usize>,
    pub steps: Option<usize>,
    pub dlp: Option<f64>,
    pub dls: Option<f64>,
}

pub fn cmd_fom_run(ctx: &Ctx, ov: FomOverrides) -> anyhow::Result<()> {
    let (_, mesh_m) = require_stage(&ctx.out, "mesh", "fom")?;
    let upstream = inherited_config(&mesh_m)?;
    let mut cfg = ctx.cfg.clone();
    cfg.mesh = upstream.mesh.clone();
    cfg.phases = upstream.phases.clone();

    if let Some(n) = ov.paths {
        cfg.paths.val = n;
        cfg.paths.train = cfg.paths.train.min(n);
    }
    if let Some(n) = ov.train_paths {
        cfg.paths.train = n;
    }
    if let Some(n) = ov.steps {
        cfg.paths.steps = n;
    }
    if let Some(x) = ov.dlp {
        cfg.paths.dlp = x;
    }
    if let Some(x) = ov.dls {
        cfg.paths.dls = x;
    }
    if cfg.paths.train == 0 || cfg.paths.train > cfg.paths.val {
        return Err(CliError::Config(format!(
            "paths need 0 < train <= val, got train = {} and val = {}",
            cfg.paths.train, cfg.paths.val
        ))
        .into());
    }
    cfg.seed = effective_seed(cfg.seed, ctx.seed_flag)?;

    let rve = build_rve(&cfg)?;
    let paths = gen_load_paths(
        cfg.seed,
        cfg.paths.val,
        cfg.paths.steps,
        cfg.paths.dlp,
        cfg.paths.dls,
    )?;
    let fom = hyperrom::bench::run_fom_campaign(&rve, &paths, &cfg.solver.to_opts(), true)?;

    let flat_states: Vec<&FullState> = fom.states.iter().flatten().collect();
    let s = flat_states.len();
    let mut snapshots = DMatrix::zeros(rve.n_dofs(), s);
    for (j, st) in flat_states.iter().enumerate() {
        snapshots.set_column(j, &st.u);
    }
    let params = matrix3_columns(&flat_states.iter().map(|st| st.fbar).collect::<Vec<_>>());
    let pbars = matrix3_columns(&fom.pbars.iter().flatten().copied().collect::<Vec<_>>());
    let mut meta = DMatrix::zeros(2, s);
    let mut col = 0;
    for (p, path) in fom.states.iter().enumerate() {
        for k in 0..path.len() {
            meta[(0, col)] = p as f64;
            meta[(1, col)] = k as f64;
            col += 1;
        }
    }

    let dir = fresh_stage_dir(&ctx.out, "fom")?;
    let mut manifest = Manifest::new("fom", cfg.seed, ctx.threads, cfg.echo());
    manifest.inputs.push(input_of(&ctx.out, "mesh")?);
    manifest.add_block(&dir, "snapshots", &snapshots)?;
    manifest.add_block(&dir, "params", &params)?;
    manifest.add_block(&dir, "pbars", &pbars)?;
    manifest.add_block(&dir, "meta", &meta)?;
    manifest.notes = json!({
        "n_paths": cfg.paths.val,
        "n_train_paths": cfg.paths.train,
        "n_steps": cfg.paths.steps,
        "n_snapshots": s,
        "n_free_dofs": rve.n_dofs(),
        "newton_iters": fom.newton_iters,
    });
    store::write_manifest(&dir, &manifest)?;
    write_json(
        &dir.join("timings.json"),
        &json!({ "solve_wall": fom.solve_wall, "homog_wall": fom.homog_wall }),
    )?;

    println!(
        "fom: persisted {} snapshot columns ({} paths x {} steps, {} dofs, {} Newton iterations) -> {}",
        s,
        cfg.paths.val,
        cfg.paths.steps,
        rve.n_dofs(),
        fom.newton_iters,
        dir.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// shared reconstruction
// ---------------------------------------------------------------------------

/// Builds the training snapshot set from a loaded fom stage.
fn train_snapshot_set(lf: &LoadedFom) -> SnapshotSet {
    let mut snaps = SnapshotSet::new(lf.rve.n_dofs());
    for (p, path) in lf.states.iter().take(lf.n_train).enumerate() {
        for (k, st) in path.iter().enumerate() {
            snaps.push(&st.u, st.fbar, p, k);
        }
    }
    snaps
}

fn train_stress(lf: &LoadedFom) -> anyhow::Result<StressSnapshots> {
    let refs: Vec<&FullState> = lf.states.iter().take(lf.n_train).flatten().collect();
    Ok(stress_snapshots(&lf.rve, &refs)?)
}

/// Refits the approximation space recorded by a reduce stage and requires
/// bitwise agreement with its persisted basis blocks.
fn refit_verified_model(
    reduce_dir: &std::path::Path,
    reduce_m: &Manifest,
    snaps: &SnapshotSet,
) -> anyhow::Result<(ReduceParams, ReducedModel)> {
    let rcfg = inherited_config(reduce_m)?;
    let rp = rcfg.reduce.to_params(reduce_m.seed);
    let model = fit(snaps, &rp)?;
    for c in 0..model.n_clusters() {
        let persisted = reduce_m.read_checked(reduce_dir, &format!("basis_c{c}"))?;
        if !bits_equal(&persisted, model.basis(c)) {
            return Err(CliError::Verification(format!(
                "refitting the {} space does not reproduce the persisted basis of \
                 cluster {c}; the reduce stage is stale relative to the snapshots",
                rcfg.reduce.method
            ))
            .into());
        }
    }
    Ok((rp, model))
}

/// Reads the residual snapshots recorded by the galerkin stage.
fn read_residuals(
    galerkin_dir: &std::path::Path,
    galerkin_m: &Manifest,
) -> anyhow::Result<ResidualSet> {
    if !has_block(galerkin_m, "residuals") {
        return Err(CliError::MissingStage {
            stage: "galerkin residual snapshots".to_string(),
            needed_by: "hyper".to_string(),
            hint: "rom run --galerkin --record-residuals".to_string(),
        }
        .into());
    }
    let g = galerkin_m.read_checked(galerkin_dir, "residuals")?;
    let meta_block = galerkin_m.read_checked(galerkin_dir, "residual_meta")?;
    if meta_block.ncols() != g.ncols() || meta_block.nrows() != 4 {
        return Err(CliError::Verification(
            "residual_meta block does not match the residual snapshot count".into(),
        )
        .into());
    }
    let meta = (0..meta_block.ncols())
        .map(|j| ResidualMeta {
            path: meta_block[(0, j)] as usize,
            step: meta_block[(1, j)] as usize,
            iter: meta_block[(2, j)] as usize,
            converged: meta_block[(3, j)] != 0.0,
        })
        .collect();
    Ok(ResidualSet { g, meta })
}

/// Rebuilds the hyperreduction recorded by a hyper stage and requires
/// bitwise agreement with its persisted magic points and weights.
fn rebuild_verified_hyper(
    hyper_dir: &std::path::Path,
    hyper_m: &Manifest,
    rve: &Rve,
    model: &ReducedModel,
    residuals: &ResidualSet,
    stress: &StressSnapshots,
) -> anyhow::Result<(RunConfig, HyperModel)> {
    let hcfg = inherited_config(hyper_m)?;
    let h = hcfg.hyper;
    let hm = build_hyper_model(rve, model, residuals, stress, h.method, h.m, h.lehm_eps)?;
    let magic = hyper_m.read_checked(hyper_dir, "magic_dofs")?;
    let xi = hyper_m.read_checked(hyper_dir, "xi")?;
    let mut current_xi = DMatrix::zeros(hm.xi.elements.len(), 2);
    for (r, (&e, &w)) in hm.xi.elements.iter().zip(&hm.xi.xi).enumerate() {
        current_xi[(r, 0)] = e as f64;
        current_xi[(r, 1)] = w;
    }
    if !bits_equal(&magic, &index_column(&hm.magic.indices)) || !bits_equal(&xi, &current_xi) {
        return Err(CliError::Verification(
            "rebuilding the hyperreduction does not reproduce the persisted magic \
             points or quadrature weights; the hyper stage is stale"
                .into(),
        )
        .into());
    }
    Ok((hcfg, hm))
}

/// Assembles an in-memory campaign from the persisted fom stage.
fn to_campaign(lf: LoadedFom) -> anyhow::Result<Campaign> {
    let snaps = train_snapshot_set(&lf);
    let stress = train_stress(&lf)?;
    let spec = CampaignSpec {
        divisions: lf.cfg.mesh.divisions,
        seed: lf.seed,
        n_train_paths: lf.n_train,
        n_val_paths: lf.paths.len(),
        n_steps: lf.states.first().map_or(0, Vec::len),
        dlp: lf.cfg.paths.dlp,
        dls: lf.cfg.paths.dls,
    };
    let opts = lf.cfg.solver.to_opts();
    Ok(Campaign {
        rve: lf.rve,
        spec,
        paths: lf.paths,
        fom: FomResult {
            states: lf.states,
            pbars: lf.pbars,
            newton_iters: lf.newton_iters,
            solve_wall: lf.solve_wall,
            homog_wall: lf.homog_wall,
        },
        snaps,
        stress,
        opts,
    })
}

// ---------------------------------------------------------------------------
// train reduce
// ---------------------------------------------------------------------------

pub struct ReduceOverrides {
    pub method: Option<String>,
    pub d: Option<usize>,
    pub d_bar: Option<usize>,
    pub k: Option<usize>,
    pub n_chart: Option<usize>,
    pub n_clusters: Option<usize>,
    pub overlap: Option<usize>,
    pub d_tilde: Option<usize>,
}

pub fn cmd_train_reduce(ctx: &Ctx, ov: ReduceOverrides) -> anyhow::Result<()> {
    let (fom_dir, fom_m) = require_stage(&ctx.out, "fom", "reduce")?;
    let lf = load_fom(&fom_dir, &fom_m)?;
    let mut cfg = inherit_shared(ctx.cfg.clone(), &lf.cfg);

    if let Some(m) = &ov.method {
        cfg.reduce.method = crate::config::parse_reduce_method(m)?;
    }
    if let Some(d) = ov.d {
        cfg.reduce.d = d;
    }
    if let Some(v) = ov.d_bar {
        cfg.reduce.d_bar = v;
    }
    if let Some(v) = ov.k {
        cfg.reduce.k = v;
    }
    if let Some(v) = ov.n_chart {
        cfg.reduce.n_chart = v;
    }
    if let Some(v) = ov.n_clusters {
        cfg.reduce.n_clusters = v;
    }
    if let Some(v) = ov.overlap {
        cfg.reduce.overlap = v;
    }
    if let Some(v) = ov.d_tilde {
        cfg.reduce.d_tilde = v;
    }
    cfg.seed = effective_seed(cfg.seed, ctx.seed_flag)?;

    let snaps = train_snapshot_set(&lf);
    let rp = cfg.reduce.to_params(cfg.seed);
    let model = fit(&snaps, &rp)?;

    let dir = fresh_stage_dir(&ctx.out, "reduce")?;
    let mut manifest = Manifest::new("reduce", cfg.seed, ctx.threads, cfg.echo());
    manifest.inputs.push(input_of(&ctx.out, "fom")?);
    for c in 0..model.n_clusters() {
        manifest.add_block(&dir, &format!("basis_c{c}"), model.basis(c))?;
    }
    manifest.notes = json!({
        "method": cfg.reduce.method.to_string(),
        "d": model.dim(),
        "n_clusters": model.n_clusters(),
        "d_bar_cols": model.basis(0).ncols(),
        "n_snapshots": snaps.len(),
    });
    store::write_manifest(&dir, &manifest)?;

    println!(
        "reduce: fitted {} space with d = {} on {} snapshots ({} cluster{}) -> {}",
        cfg.reduce.method,
        model.dim(),
        snaps.len(),
        model.n_clusters(),
        if model.n_clusters() == 1 { "" } else { "s" },
        dir.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// rom run --galerkin
// ---------------------------------------------------------------------------

pub fn cmd_rom_galerkin(
    ctx: &Ctx,
    record_residuals: bool,
    budget: Option<usize>,
    max_iter: Option<usize>,
) -> anyhow::Result<()> {
    let (fom_dir, fom_m) = require_stage(&ctx.out, "fom", "galerkin")?;
    let (reduce_dir, reduce_m) = require_stage(&ctx.out, "reduce", "galerkin")?;
    let lf = load_fom(&fom_dir, &fom_m)?;
    let reduce_cfg = inherited_config(&reduce_m)?;
    let mut cfg = inherit_shared(ctx.cfg.clone(), &lf.cfg);
    cfg.reduce = reduce_cfg.reduce;
    if let Some(n) = max_iter {
        cfg.solver.max_iter = n;
    }
    let divergence_budget = budget.unwrap_or(cfg.run.divergence_budget);
    cfg.run.divergence_budget = divergence_budget;
    cfg.seed = effective_seed(cfg.seed, ctx.seed_flag)?;

    let snaps = train_snapshot_set(&lf);
    let (rp, model) = refit_verified_model(&reduce_dir, &reduce_m, &snaps)?;
    let opts = cfg.solver.to_opts();

    let wall_start = Instant::now();
    let runs: Vec<hyperrom::Result<_>> = lf
        .paths
        .par_iter()
        .enumerate()
        .map(|(p, path)| {
            let record = record_residuals && p < lf.n_train;
            run_galerkin_path(&lf.rve, &model, &rp, &path.fbar_sequence(), p, &opts, record)
        })
        .collect();
    let wall = wall_start.elapsed().as_secs_f64();

    let mut states: Vec<Option<DVector<f64>>> = Vec::new();
    let mut residual_parts: Vec<ResidualSet> = Vec::new();
    let mut timings = Timings::default();
    let mut diverged = 0;
    let mut newton_iters = 0;
    let mut path_rows = Vec::with_capacity(lf.paths.len());
    for (p, run) in runs.into_iter().enumerate() {
        let run = run?;
        let path_states: Vec<Option<DVector<f64>>> =
            run.states.iter().map(|s| s.as_ref().map(|st| st.u.clone())).collect();
        let refs: Vec<DVector<f64>> = lf.states[p].iter().map(|st| st.u.clone()).collect();
        let iters: usize = run.steps.iter().map(|s| s.newton_iters).sum();
        path_rows.push(json!({
            "path": p,
            "newton_iters": iters,
            "diverged": run.divergences,
            "mean_error_u_percent": json_opt(safe_metric(&path_states, &refs)),
        }));
        states.extend(path_states);
        diverged += run.divergences;
        newton_iters += iters;
        timings.add(&run.timings);
        if let Some(r) = run.residuals {
            residual_parts.push(r);
        }
    }

    let refs_flat: Vec<DVector<f64>> =
        lf.states.iter().flatten().map(|st| st.u.clone()).collect();
    let mean_error_u = safe_metric(&states, &refs_flat);

    let n_res: usize = residual_parts.iter().map(|r| r.g.ncols()).sum();
    let dir = fresh_stage_dir(&ctx.out, "galerkin")?;
    let mut manifest = Manifest::new("galerkin", cfg.seed, ctx.threads, cfg.echo());
    manifest.inputs.push(input_of(&ctx.out, "fom")?);
    manifest.inputs.push(input_of(&ctx.out, "reduce")?);
    if record_residuals {
        let mut g = DMatrix::zeros(lf.rve.n_dofs(), n_res);
        let mut meta = DMatrix::zeros(4, n_res);
        let mut at = 0;
        for part in &residual_parts {
            g.columns_mut(at, part.g.ncols()).copy_from(&part.g);
            for (j, m) in part.meta.iter().enumerate() {
                meta[(0, at + j)] = m.path as f64;
                meta[(1, at + j)] = m.step as f64;
                meta[(2, at + j)] = m.iter as f64;
                meta[(3, at + j)] = if m.converged { 1.0 } else { 0.0 };
            }
            at += part.g.ncols();
        }
        manifest.add_block(&dir, "residuals", &g)?;
        manifest.add_block(&dir, "residual_meta", &meta)?;
    }
    let report = json!({
        "mean_error_u_percent": json_opt(mean_error_u),
        "diverged": diverged,
        "newton_iters": newton_iters,
        "n_residual_columns": if record_residuals { n_res } else { 0 },
        "paths": path_rows,
    });
    add_json_file(&mut manifest, &dir, "report.json", &report)?;
    manifest.notes = json!({
        "mean_error_u_percent": json_opt(mean_error_u),
        "diverged": diverged,
        "newton_iters": newton_iters,
        "n_residual_columns": if record_residuals { n_res } else { 0 },
    });
    store::write_manifest(&dir, &manifest)?;
    write_json(
        &dir.join("timings.json"),
        &json!({ "wall": wall, "breakdown": timings, "online": hyperrom::bench::online_total(&timings) }),
    )?;

    println!(
        "galerkin: mean u error {} over {} paths, {} diverged step(s), {} residual column(s) -> {}",
        mean_error_u.map_or("n/a".to_string(), |e| format!("{e:.4}%")),
        lf.paths.len(),
        diverged,
        if record_residuals { n_res } else { 0 },
        dir.display()
    );

    if diverged > divergence_budget {
        return Err(CliError::DivergenceBudget { diverged, budget: divergence_budget }.into());
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// train hyper
// ---------------------------------------------------------------------------

pub fn cmd_train_hyper(
    ctx: &Ctx,
    method: Option<String>,
    m: Option<usize>,
    lehm_eps: Option<f64>,
) -> anyhow::Result<()> {
    let (fom_dir, fom_m) = require_stage(&ctx.out, "fom", "hyper")?;
    let (reduce_dir, reduce_m) = require_stage(&ctx.out, "reduce", "hyper")?;
    let (galerkin_dir, galerkin_m) = require_stage(&ctx.out, "galerkin", "hyper")?;
    let lf = load_fom(&fom_dir, &fom_m)?;
    let reduce_cfg = inherited_config(&reduce_m)?;
    let mut cfg = inherit_shared(ctx.cfg.clone(), &lf.cfg);
    cfg.reduce = reduce_cfg.reduce;
    if let Some(name) = &method {
        cfg.hyper.method = crate::config::parse_hyper_method(name)?;
    }
    if let Some(v) = m {
        cfg.hyper.m = v;
    }
    if let Some(v) = lehm_eps {
        cfg.hyper.lehm_eps = v;
    }
    cfg.seed = effective_seed(cfg.seed, ctx.seed_flag)?;

    let snaps = train_snapshot_set(&lf);
    let (_, model) = refit_verified_model(&reduce_dir, &reduce_m, &snaps)?;
    let residuals = read_residuals(&galerkin_dir, &galerkin_m)?;
    let stress = train_stress(&lf)?;
    let hm = build_hyper_model(
        &lf.rve,
        &model,
        &residuals,
        &stress,
        cfg.hyper.method,
        cfg.hyper.m,
        cfg.hyper.lehm_eps,
    )?;

    let dir = fresh_stage_dir(&ctx.out, "hyper")?;
    let mut manifest = Manifest::new("hyper", cfg.seed, ctx.threads, cfg.echo());
    manifest.inputs.push(input_of(&ctx.out, "fom")?);
    manifest.inputs.push(input_of(&ctx.out, "reduce")?);
    manifest.inputs.push(input_of(&ctx.out, "galerkin")?);
    manifest.add_block(&dir, "magic_dofs", &index_column(&hm.magic.indices))?;
    manifest.add_block(&dir, "magic_elements", &index_column(&hm.magic.elements))?;
    manifest.add_block(&dir, "im_dofs", &index_column(&hm.magic.dofs))?;
    let mut xi = DMatrix::zeros(hm.xi.elements.len(), 2);
    for (r, (&e, &w)) in hm.xi.elements.iter().zip(&hm.xi.xi).enumerate() {
        xi[(r, 0)] = e as f64;
        xi[(r, 1)] = w;
    }
    manifest.add_block(&dir, "xi", &xi)?;
    for c in 0..model.n_clusters() {
        if !hm.left.is_empty() {
            manifest.add_block(&dir, &format!("left_c{c}"), &hm.left[c])?;
        }
        manifest.add_block(&dir, &format!("phibar_im_c{c}"), &hm.phibar_im[c])?;
        manifest.add_block(&dir, &format!("phibar_magic_c{c}"), &hm.phibar_magic[c])?;
    }
    manifest.notes = json!({
        "method": cfg.hyper.method.to_string(),
        "m": hm.magic.indices.len(),
        "n_elements": hm.magic.elements.len(),
        "n_dofs": hm.magic.dofs.len(),
        "lehm_condition": hm.lehm_condition,
        "xi_residual": hm.xi.residual,
    });
    store::write_manifest(&dir, &manifest)?;

    println!(
        "hyper: {} with m = {} magic points, |E_m| = {} elements, |I_m| = {} dofs -> {}",
        cfg.hyper.method,
        hm.magic.indices.len(),
        hm.magic.elements.len(),
        hm.magic.dofs.len(),
        dir.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// rom run --hyper
// ---------------------------------------------------------------------------

pub fn cmd_rom_hyper(
    ctx: &Ctx,
    budget: Option<usize>,
    max_iter: Option<usize>,
    paper_sign: bool,
) -> anyhow::Result<()> {
    let (fom_dir, fom_m) = require_stage(&ctx.out, "fom", "rom")?;
    let (reduce_dir, reduce_m) = require_stage(&ctx.out, "reduce", "rom")?;
    let (galerkin_dir, galerkin_m) = require_stage(&ctx.out, "galerkin", "rom")?;
    let (hyper_dir, hyper_m) = require_stage(&ctx.out, "hyper", "rom")?;
    let lf = load_fom(&fom_dir, &fom_m)?;
    let reduce_cfg = inherited_config(&reduce_m)?;
    let mut cfg = inherit_shared(ctx.cfg.clone(), &lf.cfg);
    cfg.reduce = reduce_cfg.reduce;
    if let Some(n) = max_iter {
        cfg.solver.max_iter = n;
    }
    let divergence_budget = budget.unwrap_or(cfg.run.divergence_budget);
    cfg.run.divergence_budget = divergence_budget;
    cfg.seed = effective_seed(cfg.seed, ctx.seed_flag)?;

    let snaps = train_snapshot_set(&lf);
    let (rp, model) = refit_verified_model(&reduce_dir, &reduce_m, &snaps)?;
    let residuals = read_residuals(&galerkin_dir, &galerkin_m)?;
    let stress = train_stress(&lf)?;
    let (hcfg, hm) = rebuild_verified_hyper(&hyper_dir, &hyper_m, &lf.rve, &model, &residuals, &stress)?;
    cfg.hyper = hcfg.hyper;
    let lspg_paper_sign = paper_sign || cfg.hyper.lspg_paper_sign;
    cfg.hyper.lspg_paper_sign = lspg_paper_sign;
    let opts = cfg.solver.to_opts();

    type PathOut = (Vec<Option<DVector<f64>>>, Vec<Option<Matrix3<f64>>>, usize, usize, Timings, f64);
    let per_path: Vec<hyperrom::Result<PathOut>> = lf
        .paths
        .par_iter()
        .map(|path| {
            let run_cfg = HyperRunConfig {
                rve: &lf.rve,
                model: &model,
                rp: &rp,
                hyper: &hm,
                opts: &opts,
                lspg_paper_sign,
                record_full_states: true,
                homogenize: true,
            };
            let t = Instant::now();
            let run = run_hyper_rve(&run_cfg, &path.fbar_sequence())?;
            let wall = t.elapsed().as_secs_f64();
            let u: Vec<Option<DVector<f64>>> =
                run.states.iter().map(|s| s.as_ref().map(|st| st.u.clone())).collect();
            let pb: Vec<Option<Matrix3<f64>>> = run
                .steps
                .iter()
                .map(|s| s.response.as_ref().map(|r| r.pbar))
                .collect();
            let iters: usize = run.steps.iter().map(|s| s.newton_iters).sum();
            Ok((u, pb, iters, run.divergences, run.timings, wall))
        })
        .collect();

    let mut states = Vec::new();
    let mut pbars = Vec::new();
    let mut timings = Timings::default();
    let mut wall = 0.0;
    let mut diverged = 0;
    let mut newton_iters = 0;
    let mut path_rows = Vec::with_capacity(lf.paths.len());
    let mut csv = String::from(
        "path,steps,newton_iters,diverged,mean_error_u_percent,mean_error_p_percent\n",
    );
    for (p, out) in per_path.into_iter().enumerate() {
        let (u, pb, iters, div, t, w) = out?;
        let refs_u: Vec<DVector<f64>> = lf.states[p].iter().map(|st| st.u.clone()).collect();
        let err_u = safe_metric(&u, &refs_u);
        let err_p = safe_metric_stress(&pb, &lf.pbars[p]);
        path_rows.push(json!({
            "path": p,
            "newton_iters": iters,
            "diverged": div,
            "mean_error_u_percent": json_opt(err_u),
            "mean_error_p_percent": json_opt(err_p),
        }));
        csv.push_str(&format!(
            "{p},{},{iters},{div},{},{}\n",
            u.len(),
            csv_opt(err_u),
            csv_opt(err_p)
        ));
        states.extend(u);
        pbars.extend(pb);
        newton_iters += iters;
        diverged += div;
        timings.add(&t);
        wall += w;
    }

    let refs_flat: Vec<DVector<f64>> =
        lf.states.iter().flatten().map(|st| st.u.clone()).collect();
    let pbar_refs: Vec<Matrix3<f64>> = lf.pbars.iter().flatten().copied().collect();
    let mean_error_u = safe_metric(&states, &refs_flat);
    let mean_error_p = safe_metric_stress(&pbars, &pbar_refs);

    let dir = fresh_stage_dir(&ctx.out, "rom")?;
    let mut manifest = Manifest::new("rom", cfg.seed, ctx.threads, cfg.echo());
    manifest.inputs.push(input_of(&ctx.out, "fom")?);
    manifest.inputs.push(input_of(&ctx.out, "reduce")?);
    manifest.inputs.push(input_of(&ctx.out, "galerkin")?);
    manifest.inputs.push(input_of(&ctx.out, "hyper")?);
    let report = json!({
        "reduce_method": cfg.reduce.method.to_string(),
        "hyper_method": cfg.hyper.method.to_string(),
        "d": model.dim(),
        "m": hm.magic.indices.len(),
        "n_paths": lf.paths.len(),
        "n_states": states.len(),
        "mean_error_u_percent": json_opt(mean_error_u),
        "mean_error_p_percent": json_opt(mean_error_p),
        "diverged": diverged,
        "newton_iters": newton_iters,
        "paths": path_rows,
    });
    add_json_file(&mut manifest, &dir, "report.json", &report)?;
    add_text_file(&mut manifest, &dir, "errors.csv", &csv)?;
    manifest.notes = json!({
        "mean_error_u_percent": json_opt(mean_error_u),
        "mean_error_p_percent": json_opt(mean_error_p),
        "diverged": diverged,
        "newton_iters": newton_iters,
    });
    store::write_manifest(&dir, &manifest)?;
    write_json(
        &dir.join("timings.json"),
        &json!({
            "wall": wall,
            "breakdown": timings,
            "online": hyperrom::bench::online_total(&timings),
            "fom_solve_wall": lf.solve_wall,
        }),
    )?;

    println!(
        "rom: {}-{} d = {} m = {}; mean u error {}, mean P error {}, {} diverged step(s) -> {}",
        cfg.reduce.method,
        cfg.hyper.method,
        model.dim(),
        hm.magic.indices.len(),
        mean_error_u.map_or("n/a".to_string(), |e| format!("{e:.4}%")),
        mean_error_p.map_or("n/a".to_string(), |e| format!("{e:.4}%")),
        diverged,
        dir.display()
    );

    if diverged > divergence_budget {
        return Err(CliError::DivergenceBudget { diverged, budget: divergence_budget }.into());
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// sweep
// ---------------------------------------------------------------------------

pub fn cmd_sweep(
    ctx: &Ctx,
    methods: Vec<String>,
    hypers: Vec<String>,
    ds: Vec<usize>,
    ms: Vec<usize>,
) -> anyhow::Result<()> {
    let (fom_dir, fom_m) = require_stage(&ctx.out, "fom", "sweep")?;
    let lf = load_fom(&fom_dir, &fom_m)?;
    let mut cfg = inherit_shared(ctx.cfg.clone(), &lf.cfg);
    if !methods.is_empty() {
        cfg.sweep.methods = methods
            .iter()
            .map(|s| crate::config::parse_reduce_method(s))
            .collect::<Result<_, _>>()?;
    }
    if !hypers.is_empty() {
        cfg.sweep.hypers = hypers
            .iter()
            .map(|s| crate::config::parse_hyper_method(s))
            .collect::<Result<_, _>>()?;
    }
    if !ds.is_empty() {
        cfg.sweep.d = ds;
    }
    if !ms.is_empty() {
        cfg.sweep.m = ms;
    }
    if cfg.sweep.methods.is_empty()
        || cfg.sweep.hypers.is_empty()
        || cfg.sweep.d.is_empty()
        || cfg.sweep.m.is_empty()
    {
        return Err(CliError::Config("sweep grid must not be empty".into()).into());
    }
    cfg.seed = effective_seed(cfg.seed, ctx.seed_flag)?;

    let grid = SweepGrid {
        methods: cfg.sweep.methods.clone(),
        hypers: cfg.sweep.hypers.clone(),
        ds: cfg.sweep.d.clone(),
        ms: cfg.sweep.m.clone(),
        lehm_eps: cfg.sweep.lehm_eps,
    };
    let fom_solve_wall = lf.solve_wall;
    let campaign = to_campaign(lf)?;
    let report = sweep(&campaign, &grid);

    let mut accuracy = String::from(
        "method,hyper,d,m,mean_error_u_percent,mean_error_p_percent,diverged,newton_iters,failure\n",
    );
    let mut failed = 0;
    for c in &report.cells {
        if c.failure.is_some() {
            failed += 1;
        }
        accuracy.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            c.method,
            c.hyper,
            c.d,
            c.m,
            csv_opt(c.mean_error_u),
            csv_opt(c.mean_error_p),
            c.diverged,
            c.newton_iters,
            csv_escape(c.failure.as_deref().unwrap_or("")),
        ));
    }

    let dir = fresh_stage_dir(&ctx.out, "sweep")?;
    let mut manifest = Manifest::new("sweep", cfg.seed, ctx.threads, cfg.echo());
    manifest.inputs.push(input_of(&ctx.out, "fom")?);
    add_text_file(&mut manifest, &dir, "accuracy.csv", &accuracy)?;
    manifest.notes = json!({
        "n_cells": report.cells.len(),
        "n_failed": failed,
    });
    store::write_manifest(&dir, &manifest)?;

    std::fs::write(dir.join("sweep.csv"), report.to_csv())?;
    std::fs::write(dir.join("sweep.json"), report.to_json()?)?;
    if fom_solve_wall > 0.0 {
        std::fs::write(dir.join("pareto.csv"), report.pareto_csv(fom_solve_wall))?;
    } else {
        eprintln!("sweep: fom timing report missing; skipping pareto.csv");
    }

    println!(
        "sweep: {} cell(s), {} failed -> {}",
        report.cells.len(),
        failed,
        dir.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// diag
// ---------------------------------------------------------------------------

pub fn cmd_diag(
    ctx: &Ctx,
    r_points: Option<usize>,
    r_min: Option<f64>,
    r_max: Option<f64>,
) -> anyhow::Result<()> {
    let (fom_dir, fom_m) = require_stage(&ctx.out, "fom", "diag")?;
    let lf = load_fom(&fom_dir, &fom_m)?;
    let mut cfg = inherit_shared(ctx.cfg.clone(), &lf.cfg);
    if let Some(v) = r_points {
        cfg.diag.r_points = v;
    }
    if let Some(v) = r_min {
        cfg.diag.r_min = v;
    }
    if let Some(v) = r_max {
        cfg.diag.r_max = v;
    }
    cfg.seed = effective_seed(cfg.seed, ctx.seed_flag)?;
    if cfg.diag.r_points < 3 {
        return Err(CliError::Config("diag needs at least 3 radii".into()).into());
    }

    let snaps = train_snapshot_set(&lf);
    let u = &snaps.u;

    let eigs = eig_decay(u)?;
    let mut eig_csv = String::from("index,eigenvalue,ratio\n");
    let lead = eigs.first().copied().unwrap_or(0.0);
    for (i, &l) in eigs.iter().enumerate() {
        let ratio = if lead > 0.0 { l / lead } else { 0.0 };
        eig_csv.push_str(&format!("{i},{l},{ratio}\n"));
    }

    let s = u.ncols();
    let mut dists = Vec::with_capacity(s * (s - 1) / 2);
    for i in 0..s {
        for j in (i + 1)..s {
            let d = (u.column(i) - u.column(j)).norm();
            if d > 0.0 {
                dists.push(d);
            }
        }
    }
    if dists.is_empty() {
        return Err(CliError::Config(
            "all training snapshots coincide; the correlation dimension is undefined".into(),
        )
        .into());
    }
    dists.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
    let lo = if cfg.diag.r_min > 0.0 {
        cfg.diag.r_min
    } else {
        dists[(dists.len() - 1) / 20]
    };
    let hi = if cfg.diag.r_max > 0.0 {
        cfg.diag.r_max
    } else {
        dists[dists.len() - 1] * 1.000001
    };
    if !(hi > lo) {
        return Err(CliError::Config(format!(
            "diag radii must satisfy r_max > r_min, got {lo} and {hi}"
        ))
        .into());
    }
    let n = cfg.diag.r_points;
    let grid: Vec<f64> = (0..n)
        .map(|i| lo * (hi / lo).powf(i as f64 / (n - 1) as f64))
        .collect();
    let curve = correlation_dimension(u, &grid)?;

    let mut corr_csv = String::from("r,c,slope\n");
    for (i, &(r, c)) in curve.points.iter().enumerate() {
        let slope = if i >= 1 && i <= curve.slopes.len() {
            curve.slopes[i - 1].1.to_string()
        } else {
            String::new()
        };
        corr_csv.push_str(&format!("{r},{c},{slope}\n"));
    }
    let mid_slope = if curve.slopes.is_empty() {
        None
    } else {
        Some(curve.slopes[curve.slopes.len() / 2].1)
    };

    let dir = fresh_stage_dir(&ctx.out, "diag")?;
    let mut manifest = Manifest::new("diag", cfg.seed, ctx.threads, cfg.echo());
    manifest.inputs.push(input_of(&ctx.out, "fom")?);
    add_text_file(&mut manifest, &dir, "eigs.csv", &eig_csv)?;
    add_text_file(&mut manifest, &dir, "correlation.csv", &corr_csv)?;
    manifest.notes = json!({
        "n_snapshots": s,
        "r_min": lo,
        "r_max": hi,
        "mid_slope": json_opt(mid_slope),
    });
    store::write_manifest(&dir, &manifest)?;

    println!(
        "diag: {} snapshots, spectrum and correlation curve over [{lo:.4}, {hi:.4}] -> {}",
        s,
        dir.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// verify
// ---------------------------------------------------------------------------

fn verify_one(out: &std::path::Path, kind: &str) -> anyhow::Result<Manifest> {
    let dir = stage_dir(out, kind);
    let manifest = store::verify_manifest(&dir)?;
    if manifest.kind != kind {
        return Err(CliError::Verification(format!(
            "{} holds a {:?} manifest where {kind:?} was expected",
            dir.display(),
            manifest.kind
        ))
        .into());
    }
    for input in &manifest.inputs {
        let updir = stage_dir(out, &input.kind);
        if !updir.join("manifest.json").is_file() {
            return Err(CliError::Verification(format!(
                "stage {kind} records a {} input but that stage is missing",
                input.kind
            ))
            .into());
        }
        let current = store::manifest_hash(&updir)?;
        if current != input.sha256 {
            return Err(CliError::Verification(format!(
                "stage {kind} was built against a {} stage that has since changed",
                input.kind
            ))
            .into());
        }
    }
    Ok(manifest)
}

/// Rebuilds the mesh from the configuration echoed in the mesh manifest and
/// requires the persisted centroid block to match bitwise.
fn verify_mesh_geometry(out: &std::path::Path, manifest: &Manifest) -> anyhow::Result<()> {
    let cfg = inherited_config(manifest)?;
    let mesh = build_rve_mesh(&cfg.mesh_spec())?;
    let mut centroids = DMatrix::zeros(mesh.num_elements(), 3);
    for e in 0..mesh.num_elements() {
        let c = mesh.element_centroid(e);
        for ax in 0..3 {
            centroids[(e, ax)] = c[ax];
        }
    }
    let persisted = manifest.read_checked(&stage_dir(out, "mesh"), "centroids")?;
    if !bits_equal(&persisted, &centroids) {
        return Err(CliError::Verification(
            "rebuilding the mesh does not reproduce the persisted centroids".into(),
        )
        .into());
    }
    Ok(())
}

/// Re-solves the first step of the first path and requires the persisted
/// snapshot column to match bitwise.
fn smoke_replay(out: &std::path::Path) -> anyhow::Result<()> {
    let dir = stage_dir(out, "fom");
    let manifest = store::read_manifest(&dir)?;
    let lf = load_fom(&dir, &manifest)?;
    let fbar = lf.paths[0].fbar_sequence()[0];
    let solve = newton_solve(&lf.rve, &fbar, &lf.cfg.solver.to_opts())?;
    if !matches!(solve.status, SolveStatus::Converged) {
        return Err(CliError::Verification(
            "smoke replay of path 0 step 1 diverged where the persisted run converged".into(),
        )
        .into());
    }
    let expected = &lf.states[0][0].u;
    let got = &solve.state.u;
    let same = expected.len() == got.len()
        && expected
            .iter()
            .zip(got.iter())
            .all(|(a, b)| a.to_bits() == b.to_bits());
    if !same {
        return Err(CliError::Verification(
            "smoke replay of path 0 step 1 does not reproduce the persisted snapshot; \
             artifacts were produced by a different build or edited"
                .into(),
        )
        .into());
    }
    Ok(())
}

pub fn cmd_verify(ctx: &Ctx, stage: Option<String>) -> anyhow::Result<()> {
    let out = &ctx.out;
    let kinds: Vec<&str> = match &stage {
        Some(s) => {
            let kind = STAGES
                .iter()
                .copied()
                .find(|k| *k == s.as_str())
                .ok_or_else(|| {
                    CliError::Config(format!(
                        "unknown stage {s:?}; expected one of {}",
                        STAGES.join(", ")
                    ))
                })?;
            if !stage_dir(out, kind).join("manifest.json").is_file() {
                return Err(CliError::MissingStage {
                    stage: kind.to_string(),
                    needed_by: "verify".to_string(),
                    hint: stage_hint(kind).to_string(),
                }
                .into());
            }
            vec![kind]
        }
        None => STAGES
            .iter()
            .copied()
            .filter(|k| stage_dir(out, k).join("manifest.json").is_file())
            .collect(),
    };
    if kinds.is_empty() {
        return Err(CliError::MissingStage {
            stage: "mesh".to_string(),
            needed_by: "verify".to_string(),
            hint: stage_hint("mesh").to_string(),
        }
        .into());
    }

    let mut total_files = 0;
    for kind in &kinds {
        let manifest = verify_one(out, kind)?;
        total_files += manifest.files.len();
        println!("verify: {kind} ok ({} file(s))", manifest.files.len());
        if *kind == "mesh" {
            verify_mesh_geometry(out, &manifest)?;
            println!("verify: mesh geometry replay ok");
        }
    }
    if kinds.contains(&"fom") {
        smoke_replay(out)?;
        println!("verify: smoke replay ok (path 0, step 1 reproduced bitwise)");
    }
    println!("verify: OK ({} stage(s), {} file(s))", kinds.len(), total_files);
    Ok(())
}
