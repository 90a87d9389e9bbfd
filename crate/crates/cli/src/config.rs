//! Run configuration: one TOML file shared by every pipeline stage.
//!
//! Every subcommand reads the same file (`hyperrom.toml` in the working
//! directory by default, `--config` to point elsewhere), applies its own
//! command-line overrides and records the resolved result verbatim in the
//! stage manifest. Stages that consume upstream artifacts inherit the
//! sections those artifacts were built with (mesh, phases, paths, solver)
//! from the upstream manifest instead of re-reading the file, so a pipeline
//! stays self-consistent even when the file changes between invocations.
//!
//! Seed precedence, highest first: `--seed` flag, the `HYPERROM_SEED`
//! environment variable, then the configuration (or, downstream, the seed
//! inherited from the upstream manifest).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use hyperrom::fem::NewtonOpts;
use hyperrom::hyper::HyperMethod;
use hyperrom::material::{moduli_from_e_nu, MaterialParams, Variant};
use hyperrom::mesh::{Inclusion, MeshSpec};
use hyperrom::reduce::{ReduceMethod, ReduceParams};

use crate::CliError;

/// Environment variable overriding the configured seed.
pub const SEED_ENV: &str = "HYPERROM_SEED";

/// Default configuration file name looked up in the working directory.
pub const DEFAULT_CONFIG: &str = "hyperrom.toml";

/// The complete resolved configuration of one stage invocation.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Output directory holding one subdirectory per stage.
    pub out: PathBuf,
    pub seed: u64,
    /// Worker thread cap; 0 uses all available cores.
    pub threads: usize,
    pub mesh: MeshConfig,
    /// Material phases indexed by material id.
    pub phases: Vec<PhaseConfig>,
    pub paths: PathsConfig,
    pub solver: SolverConfig,
    pub reduce: ReduceConfig,
    pub hyper: HyperConfig,
    pub run: RunSection,
    pub diag: DiagConfig,
    pub sweep: SweepConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            out: PathBuf::from("out"),
            seed: 7,
            threads: 0,
            mesh: MeshConfig::default(),
            phases: vec![
                PhaseConfig { e: 1000.0, nu: 0.2, variant: Variant::Stabilized },
                PhaseConfig { e: 3000.0, nu: 0.2, variant: Variant::Stabilized },
            ],
            paths: PathsConfig::default(),
            solver: SolverConfig::default(),
            reduce: ReduceConfig::default(),
            hyper: HyperConfig::default(),
            run: RunSection::default(),
            diag: DiagConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

/// Geometry of the periodic cube; defaults to the two-inclusion benchmark
/// cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MeshConfig {
    pub edge_length: f64,
    pub divisions: usize,
    pub matrix_material_id: usize,
    pub inclusions: Vec<InclusionConfig>,
}

impl Default for MeshConfig {
    fn default() -> Self {
        MeshConfig {
            edge_length: 6.0,
            divisions: 6,
            matrix_material_id: 0,
            inclusions: vec![
                InclusionConfig { center: [2.0, 2.0, 2.0], radius: 1.5, material_id: 1 },
                InclusionConfig { center: [4.0, 4.0, 4.0], radius: 1.5, material_id: 1 },
            ],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InclusionConfig {
    pub center: [f64; 3],
    pub radius: f64,
    #[serde(default = "default_inclusion_material")]
    pub material_id: usize,
}

fn default_inclusion_material() -> usize {
    1
}

/// One material phase in engineering constants.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseConfig {
    pub e: f64,
    pub nu: f64,
    #[serde(default = "default_variant")]
    pub variant: Variant,
}

fn default_variant() -> Variant {
    Variant::Stabilized
}

/// Load path set shared by the full-order and reduced stages.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Training paths; always the first `train` of the `val` generated.
    pub train: usize,
    /// Total paths solved by the reference and replayed in validation.
    pub val: usize,
    pub steps: usize,
    /// Proportional load increment per step.
    pub dlp: f64,
    /// Random perturbation magnitude per step.
    pub dls: f64,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig { train: 20, val: 50, steps: 10, dlp: 0.03, dls: 0.015 }
    }
}

/// Newton solver settings, mirrored field by field onto [`NewtonOpts`] so a
/// partial `[solver]` table falls back to the documented defaults.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub tol: f64,
    pub tol_red: f64,
    pub max_iter: usize,
    pub load_steps: usize,
    pub max_bisections: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        let o = NewtonOpts::default();
        SolverConfig {
            tol: o.tol,
            tol_red: o.tol_red,
            max_iter: o.max_iter,
            load_steps: o.load_steps,
            max_bisections: o.max_bisections,
        }
    }
}

impl SolverConfig {
    pub fn to_opts(self) -> NewtonOpts {
        NewtonOpts {
            tol: self.tol,
            tol_red: self.tol_red,
            max_iter: self.max_iter,
            load_steps: self.load_steps,
            max_bisections: self.max_bisections,
        }
    }
}

/// Approximation-space settings; zero-valued optional fields resolve to the
/// library defaults.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReduceConfig {
    pub method: ReduceMethod,
    pub d: usize,
    pub d_bar: usize,
    pub k: usize,
    pub n_chart: usize,
    pub n_clusters: usize,
    pub overlap: usize,
    pub d_tilde: usize,
    pub pm_max_iters: usize,
    pub pm_tol: f64,
}

impl Default for ReduceConfig {
    fn default() -> Self {
        let rp = ReduceParams::new(ReduceMethod::Pod, 15, 0);
        ReduceConfig {
            method: ReduceMethod::Pod,
            d: 15,
            d_bar: rp.d_bar,
            k: rp.k,
            n_chart: rp.n_chart,
            n_clusters: rp.n_clusters,
            overlap: rp.overlap,
            d_tilde: rp.d_tilde,
            pm_max_iters: rp.pm_max_iters,
            pm_tol: rp.pm_tol,
        }
    }
}

impl ReduceConfig {
    pub fn to_params(self, seed: u64) -> ReduceParams {
        let mut rp = ReduceParams::new(self.method, self.d, seed);
        rp.d_bar = self.d_bar;
        rp.k = self.k;
        rp.n_chart = self.n_chart;
        rp.n_clusters = self.n_clusters;
        rp.overlap = self.overlap;
        rp.d_tilde = self.d_tilde;
        rp.pm_max_iters = self.pm_max_iters;
        rp.pm_tol = self.pm_tol;
        rp
    }
}

/// Hyperreduction settings.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HyperConfig {
    pub method: HyperMethod,
    /// Magic point count.
    pub m: usize,
    /// Ridge floor of the element fit; 0 resolves to the scaled default.
    pub lehm_eps: f64,
    /// Replay the textbook sign convention in the least-squares update.
    pub lspg_paper_sign: bool,
}

impl Default for HyperConfig {
    fn default() -> Self {
        HyperConfig {
            method: HyperMethod::Lehm,
            m: 100,
            lehm_eps: 0.0,
            lspg_paper_sign: false,
        }
    }
}

/// Online run policy.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    /// Maximum tolerated diverged steps before the run exits with code 4.
    pub divergence_budget: usize,
}

/// Snapshot diagnostics settings.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagConfig {
    /// Number of logarithmically spaced correlation radii.
    pub r_points: usize,
    /// Smallest radius; 0 picks the 5th percentile pair distance.
    pub r_min: f64,
    /// Largest radius; 0 picks the maximum pair distance.
    pub r_max: f64,
}

impl Default for DiagConfig {
    fn default() -> Self {
        DiagConfig { r_points: 24, r_min: 0.0, r_max: 0.0 }
    }
}

/// Grid of the error/runtime sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub methods: Vec<ReduceMethod>,
    pub hypers: Vec<HyperMethod>,
    pub d: Vec<usize>,
    pub m: Vec<usize>,
    pub lehm_eps: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            methods: vec![
                ReduceMethod::Pod,
                ReduceMethod::Lpod,
                ReduceMethod::Pm,
                ReduceMethod::Lle,
            ],
            hypers: vec![HyperMethod::Deim, HyperMethod::Lehm, HyperMethod::Lspg],
            d: vec![9, 15, 30],
            m: vec![50, 100],
            lehm_eps: 0.0,
        }
    }
}

impl RunConfig {
    /// Builds the mesh specification of the configured cell.
    pub fn mesh_spec(&self) -> MeshSpec {
        MeshSpec {
            edge_length: self.mesh.edge_length,
            divisions: self.mesh.divisions,
            matrix_material_id: self.mesh.matrix_material_id,
            inclusions: self
                .mesh
                .inclusions
                .iter()
                .map(|i| Inclusion {
                    center: i.center,
                    radius: i.radius,
                    material_id: i.material_id,
                })
                .collect(),
        }
    }

    /// Converts the phases to material parameters, indexed by material id.
    pub fn materials(&self) -> hyperrom::Result<Vec<MaterialParams>> {
        self.phases
            .iter()
            .map(|p| moduli_from_e_nu(p.e, p.nu, p.variant))
            .collect()
    }

    /// Serializes the resolved configuration for the manifest echo. The
    /// output directory is runtime plumbing, not a run parameter, and is
    /// normalized so identical runs hash identically wherever they land.
    pub fn echo(&self) -> serde_json::Value {
        let mut cfg = self.clone();
        cfg.out = PathBuf::from("out");
        serde_json::to_value(&cfg).expect("configuration serializes")
    }
}

/// Loads the configuration file. An explicit `--config` path must exist; the
/// default file is optional and silently replaced by built-in defaults.
pub fn load_config(explicit: Option<&Path>) -> Result<RunConfig, CliError> {
    let (path, required) = match explicit {
        Some(p) => (p.to_path_buf(), true),
        None => (PathBuf::from(DEFAULT_CONFIG), false),
    };
    if !path.is_file() {
        if required {
            return Err(CliError::Config(format!(
                "configuration file {} not found",
                path.display()
            )));
        }
        return Ok(RunConfig::default());
    }
    let text = std::fs::read_to_string(&path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    toml::from_str(&text)
        .map_err(|e| CliError::Config(format!("invalid configuration {}: {e}", path.display())))
}

/// Resolves the effective seed: flag over environment over configuration.
pub fn effective_seed(config_seed: u64, flag: Option<u64>) -> Result<u64, CliError> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v.trim().parse::<u64>().map_err(|_| {
            CliError::Config(format!("{SEED_ENV} must be an unsigned integer, got {v:?}"))
        }),
        Err(_) => Ok(config_seed),
    }
}

/// Parses a reduction method name.
pub fn parse_reduce_method(s: &str) -> Result<ReduceMethod, CliError> {
    match s.trim().to_ascii_lowercase().as_str() {
        "pod" => Ok(ReduceMethod::Pod),
        "lpod" => Ok(ReduceMethod::Lpod),
        "pm" => Ok(ReduceMethod::Pm),
        "lle" => Ok(ReduceMethod::Lle),
        other => Err(CliError::Config(format!(
            "unknown reduction method {other:?}; expected pod, lpod, pm or lle"
        ))),
    }
}

/// Parses a hyperreduction method name.
pub fn parse_hyper_method(s: &str) -> Result<HyperMethod, CliError> {
    match s.trim().to_ascii_lowercase().as_str() {
        "deim" => Ok(HyperMethod::Deim),
        "lehm" => Ok(HyperMethod::Lehm),
        "lspg" => Ok(HyperMethod::Lspg),
        other => Err(CliError::Config(format!(
            "unknown hyperreduction method {other:?}; expected deim, lehm or lspg"
        ))),
    }
}

/// Splits a comma-separated list, trimming blanks.
pub fn split_list(s: &str) -> Vec<String> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}
