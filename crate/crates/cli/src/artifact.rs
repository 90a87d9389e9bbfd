//! Stage directories, manifest chaining and artifact reconstruction.
//!
//! Every pipeline stage writes one directory under the output root holding
//! `manifest.json` plus its data blocks and reports. Manifests chain by
//! content hash: a stage records the manifest hash of each upstream stage it
//! consumed, and both the stage runners and `hyperrom verify` refuse to mix
//! artifacts whose recorded hashes no longer match what is on disk.
//!
//! Two file classes live in a stage directory. Files listed in the manifest
//! are deterministic for a fixed configuration, seed and thread count and
//! are covered by hash verification. Wall-clock timing reports
//! (`timings.json`) are intentionally unlisted: their content varies run to
//! run and must not break byte-identity of the verified artifacts.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, Matrix3};

use hyperrom::bench::{gen_load_paths, LoadPath};
use hyperrom::fem::{FullState, Rve};
use hyperrom::mesh::build_rve_mesh;
use hyperrom::store::{self, Manifest, ManifestFile, ManifestInput};

use crate::config::RunConfig;
use crate::CliError;

/// Pipeline stages in dependency order.
pub const STAGES: [&str; 8] = [
    "mesh", "fom", "reduce", "galerkin", "hyper", "rom", "sweep", "diag",
];

/// The command that produces a stage, for dependency error hints.
pub fn stage_hint(kind: &str) -> &'static str {
    match kind {
        "mesh" => "mesh",
        "fom" => "fom run",
        "reduce" => "train reduce",
        "galerkin" => "rom run --galerkin --record-residuals",
        "hyper" => "train hyper",
        "rom" => "rom run --hyper",
        "sweep" => "sweep",
        "diag" => "diag",
        _ => "mesh",
    }
}

pub fn stage_dir(out: &Path, kind: &str) -> PathBuf {
    out.join(kind)
}

fn short(hash: &str) -> &str {
    &hash[..hash.len().min(12)]
}

/// Loads a required upstream stage and checks its recorded input hashes
/// against the manifests currently on disk, so stale mixtures fail loudly.
pub fn require_stage(out: &Path, kind: &str, needed_by: &str) -> anyhow::Result<(PathBuf, Manifest)> {
    let dir = stage_dir(out, kind);
    if !dir.join("manifest.json").is_file() {
        return Err(CliError::MissingStage {
            stage: kind.to_string(),
            needed_by: needed_by.to_string(),
            hint: stage_hint(kind).to_string(),
        }
        .into());
    }
    let manifest = store::read_manifest(&dir)?;
    if manifest.kind != kind {
        return Err(CliError::Verification(format!(
            "{} holds a {:?} manifest where a {kind:?} stage was expected",
            dir.display(),
            manifest.kind
        ))
        .into());
    }
    for input in &manifest.inputs {
        let updir = stage_dir(out, &input.kind);
        if !updir.join("manifest.json").is_file() {
            return Err(CliError::MissingStage {
                stage: input.kind.clone(),
                needed_by: kind.to_string(),
                hint: stage_hint(&input.kind).to_string(),
            }
            .into());
        }
        let current = store::manifest_hash(&updir)?;
        if current != input.sha256 {
            return Err(CliError::Verification(format!(
                "stage {kind} was built against a {} stage hashing {} but the current \
                 one hashes {}; re-run `hyperrom {}` and the stages after it",
                input.kind,
                short(&input.sha256),
                short(&current),
                stage_hint(kind)
            ))
            .into());
        }
    }
    Ok((dir, manifest))
}

/// Records an upstream stage as a manifest input by its current hash.
pub fn input_of(out: &Path, kind: &str) -> anyhow::Result<ManifestInput> {
    let hash = store::manifest_hash(&stage_dir(out, kind))?;
    Ok(ManifestInput { kind: kind.to_string(), sha256: hash })
}

/// Deserializes the configuration echoed in an upstream manifest.
pub fn inherited_config(manifest: &Manifest) -> anyhow::Result<RunConfig> {
    serde_json::from_value(manifest.config.clone()).map_err(|e| {
        CliError::Verification(format!(
            "cannot decode the configuration echoed in the {} manifest: {e}",
            manifest.kind
        ))
        .into()
    })
}

/// Creates (or wipes stale contents of) a stage directory.
pub fn fresh_stage_dir(out: &Path, kind: &str) -> anyhow::Result<PathBuf> {
    let dir = stage_dir(out, kind);
    if dir.exists() {
        std::fs::remove_dir_all(&dir)?;
    }
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

/// Writes a pretty-printed JSON file and lists it in the manifest so it is
/// covered by hash verification. Only deterministic content belongs here.
pub fn add_json_file(
    manifest: &mut Manifest,
    dir: &Path,
    name: &str,
    value: &serde_json::Value,
) -> anyhow::Result<()> {
    let path = dir.join(name);
    write_json(&path, value)?;
    manifest.files.push(ManifestFile {
        name: name.to_string(),
        rows: 0,
        cols: 0,
        sha256: store::sha256_file(&path)?,
    });
    Ok(())
}

/// Writes a text file and lists it in the manifest.
pub fn add_text_file(
    manifest: &mut Manifest,
    dir: &Path,
    name: &str,
    text: &str,
) -> anyhow::Result<()> {
    let path = dir.join(name);
    std::fs::write(&path, text)?;
    manifest.files.push(ManifestFile {
        name: name.to_string(),
        rows: 0,
        cols: 0,
        sha256: store::sha256_file(&path)?,
    });
    Ok(())
}

/// Writes a pretty-printed JSON file without listing it in the manifest.
pub fn write_json(path: &Path, value: &serde_json::Value) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

/// Bitwise equality of two matrices, the currency of artifact verification.
pub fn bits_equal(a: &DMatrix<f64>, b: &DMatrix<f64>) -> bool {
    a.nrows() == b.nrows()
        && a.ncols() == b.ncols()
        && a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits())
}

/// Stacks 3x3 matrices as 9-row columns, entries in row-major order.
pub fn matrix3_columns(ms: &[Matrix3<f64>]) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(9, ms.len());
    for (j, m) in ms.iter().enumerate() {
        for r in 0..3 {
            for c in 0..3 {
                out[(3 * r + c, j)] = m[(r, c)];
            }
        }
    }
    out
}

/// Reads one column written by [`matrix3_columns`] back into a matrix.
pub fn matrix3_from_column(block: &DMatrix<f64>, j: usize) -> Matrix3<f64> {
    let mut m = Matrix3::zeros();
    for r in 0..3 {
        for c in 0..3 {
            m[(r, c)] = block[(3 * r + c, j)];
        }
    }
    m
}

/// Stacks index lists as one f64 column.
pub fn index_column(idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_iterator(idx.len(), 1, idx.iter().map(|&i| i as f64))
}

/// The full-order stage loaded back from disk: geometry, regenerated paths
/// and the persisted reference solution.
pub struct LoadedFom {
    /// Resolved configuration the stage was built with.
    pub cfg: RunConfig,
    pub seed: u64,
    pub rve: Rve,
    pub paths: Vec<LoadPath>,
    /// Reference states per path, per step.
    pub states: Vec<Vec<FullState>>,
    /// Homogenized reference stresses per path, per step.
    pub pbars: Vec<Vec<Matrix3<f64>>>,
    pub n_train: usize,
    pub newton_iters: usize,
    /// Reference solve wall time from the unhashed timing report, 0 when
    /// absent.
    pub solve_wall: f64,
    pub homog_wall: f64,
}

#[derive(serde::Deserialize)]
struct FomNotes {
    n_paths: usize,
    n_train_paths: usize,
    n_steps: usize,
    newton_iters: usize,
}

#[derive(serde::Deserialize, Default)]
struct FomTimings {
    #[serde(default)]
    solve_wall: f64,
    #[serde(default)]
    homog_wall: f64,
}

/// Rebuilds the cell and reference solution of a persisted fom stage,
/// checking that the stored load parameters still match the paths
/// regenerated from the recorded seed.
pub fn load_fom(dir: &Path, manifest: &Manifest) -> anyhow::Result<LoadedFom> {
    let cfg = inherited_config(manifest)?;
    let notes: FomNotes = serde_json::from_value(manifest.notes.clone()).map_err(|e| {
        CliError::Verification(format!("cannot decode the fom manifest notes: {e}"))
    })?;

    let mesh = build_rve_mesh(&cfg.mesh_spec())?;
    let rve = Rve::new(mesh, cfg.materials()?)?;
    let paths = gen_load_paths(
        manifest.seed,
        notes.n_paths,
        notes.n_steps,
        cfg.paths.dlp,
        cfg.paths.dls,
    )?;

    let snapshots = manifest.read_checked(dir, "snapshots")?;
    let params = manifest.read_checked(dir, "params")?;
    let pbars = manifest.read_checked(dir, "pbars")?;
    let s = notes.n_paths * notes.n_steps;
    if snapshots.ncols() != s || params.ncols() != s || pbars.ncols() != s {
        return Err(CliError::Verification(format!(
            "fom stage persists {} snapshot columns but its notes promise {s}",
            snapshots.ncols()
        ))
        .into());
    }
    if snapshots.nrows() != rve.n_dofs() {
        return Err(CliError::Verification(format!(
            "fom snapshots have {} rows but the mesh has {} free dofs",
            snapshots.nrows(),
            rve.n_dofs()
        ))
        .into());
    }

    let expected = matrix3_columns(
        &paths.iter().flat_map(|p| p.fbar_sequence()).collect::<Vec<_>>(),
    );
    if !bits_equal(&expected, &params) {
        return Err(CliError::Verification(
            "persisted load parameters disagree with the paths regenerated from the \
             recorded seed; the fom stage is stale or was edited"
                .into(),
        )
        .into());
    }

    let mut states = Vec::with_capacity(notes.n_paths);
    let mut pbar_rows = Vec::with_capacity(notes.n_paths);
    let mut col = 0;
    for _ in 0..notes.n_paths {
        let mut path_states = Vec::with_capacity(notes.n_steps);
        let mut path_pbars = Vec::with_capacity(notes.n_steps);
        for _ in 0..notes.n_steps {
            path_states.push(FullState {
                u: snapshots.column(col).into_owned(),
                fbar: matrix3_from_column(&params, col),
            });
            path_pbars.push(matrix3_from_column(&pbars, col));
            col += 1;
        }
        states.push(path_states);
        pbar_rows.push(path_pbars);
    }

    let timings: FomTimings = std::fs::read_to_string(dir.join("timings.json"))
        .ok()
        .and_then(|t| serde_json::from_str(&t).ok())
        .unwrap_or_default();

    Ok(LoadedFom {
        seed: manifest.seed,
        cfg,
        rve,
        paths,
        states,
        pbars: pbar_rows,
        n_train: notes.n_train_paths,
        newton_iters: notes.newton_iters,
        solve_wall: timings.solve_wall,
        homog_wall: timings.homog_wall,
    })
}
