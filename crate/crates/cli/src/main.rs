//! `hyperrom`: a staged pipeline for hyperreduced RVE homogenization.
//!
//! The binary drives the library through persisted stages under one output
//! directory, from meshing over full-order reference solves and offline
//! training to hyperreduced online runs, parameter sweeps, snapshot
//! diagnostics and artifact verification. Run `hyperrom --help` for the
//! stage chain and `hyperrom <command> --help` for per-stage flags.
//!
//! Exit codes: 0 success, 2 configuration error, 3 missing stage
//! dependency, 4 divergence budget exceeded, 5 verification failure.
//! The `HYPERROM_SEED` environment variable overrides the configured seed;
//! the `--seed` flag outranks both.

mod artifact;
mod config;
mod stages;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::config::load_config;
use crate::stages::Ctx;

/// Errors carrying a process exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("missing {stage} (needed by the {needed_by} stage); run `hyperrom {hint}` first")]
    MissingStage { stage: String, needed_by: String, hint: String },
    #[error("divergence budget exceeded: {diverged} diverged step(s) > budget {budget}")]
    DivergenceBudget { diverged: usize, budget: usize },
    #[error("verification failed: {0}")]
    Verification(String),
}

#[derive(Parser)]
#[command(
    name = "hyperrom",
    version,
    about = "Hyperreduced nonlinear homogenization pipeline",
    long_about = "Staged pipeline for projection-based model order reduction of a \
                  hyperelastic RVE.\n\nTypical chain:\n  hyperrom mesh\n  hyperrom fom run\n  \
                  hyperrom train reduce\n  hyperrom rom run --galerkin --record-residuals\n  \
                  hyperrom train hyper\n  hyperrom rom run --hyper\n\nExit codes: 0 success, \
                  2 configuration error, 3 missing stage dependency, 4 divergence budget \
                  exceeded, 5 verification failure. HYPERROM_SEED overrides the configured \
                  seed; --seed outranks both."
)]
struct Cli {
    /// Configuration file (default: hyperrom.toml if present).
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Output directory holding the stage artifacts.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Worker thread cap (0 = all cores).
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,
    /// Seed override (outranks HYPERROM_SEED and the configuration).
    #[arg(long, global = true, value_name = "SEED")]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the periodic RVE mesh stage.
    Mesh {
        /// Elements per cube edge.
        #[arg(long)]
        divisions: Option<usize>,
        /// Cube edge length in mm.
        #[arg(long)]
        edge_length: Option<f64>,
    },
    /// Full-order reference solves.
    Fom {
        #[command(subcommand)]
        command: FomCommand,
    },
    /// Offline training stages.
    Train {
        #[command(subcommand)]
        command: TrainCommand,
    },
    /// Online reduced-order runs.
    Rom {
        #[command(subcommand)]
        command: RomCommand,
    },
    /// Error/runtime grid over methods and dimensions.
    Sweep(SweepArgs),
    /// Snapshot spectrum and correlation-dimension diagnostics.
    Diag {
        /// Number of logarithmically spaced radii.
        #[arg(long)]
        r_points: Option<usize>,
        /// Smallest radius (default: 5th percentile pair distance).
        #[arg(long)]
        r_min: Option<f64>,
        /// Largest radius (default: maximum pair distance).
        #[arg(long)]
        r_max: Option<f64>,
    },
    /// Re-check artifact hashes and replay a deterministic smoke solve.
    Verify {
        /// Verify a single stage instead of every stage present.
        #[arg(long)]
        stage: Option<String>,
    },
}

#[derive(Subcommand)]
enum FomCommand {
    /// Solve every configured load path with the full-order model and
    /// persist the snapshot, parameter and stress blocks.
    Run {
        /// Total solved paths (validation set; training is a prefix).
        #[arg(long)]
        paths: Option<usize>,
        /// Training path count (first paths of the set).
        #[arg(long)]
        train_paths: Option<usize>,
        /// Load steps per path.
        #[arg(long)]
        steps: Option<usize>,
        /// Proportional load increment per step.
        #[arg(long)]
        dlp: Option<f64>,
        /// Random perturbation magnitude per step.
        #[arg(long)]
        dls: Option<f64>,
    },
}

#[derive(Subcommand)]
enum TrainCommand {
    /// Fit the approximation space on the training snapshots.
    Reduce {
        /// Reduction method: pod, lpod, pm or lle.
        #[arg(long)]
        method: Option<String>,
        /// Online coordinate count.
        #[arg(long)]
        d: Option<usize>,
        /// Intermediate dimension (0 = lossless).
        #[arg(long)]
        d_bar: Option<usize>,
        /// LLE graph neighbor count (0 = default).
        #[arg(long)]
        k: Option<usize>,
        /// Chart neighbor count (0 = default).
        #[arg(long)]
        n_chart: Option<usize>,
        /// LPOD cluster count.
        #[arg(long)]
        n_clusters: Option<usize>,
        /// LPOD overlap snapshots per cluster.
        #[arg(long)]
        overlap: Option<usize>,
        /// PM quadratic dimension (0 = d).
        #[arg(long)]
        d_tilde: Option<usize>,
    },
    /// Fit the hyperreduction on the recorded residual snapshots.
    Hyper {
        /// Hyperreduction method: deim, lehm or lspg.
        #[arg(long)]
        method: Option<String>,
        /// Magic point count.
        #[arg(long)]
        m: Option<usize>,
        /// Ridge floor of the element fit (0 = scaled default).
        #[arg(long)]
        lehm_eps: Option<f64>,
    },
}

#[derive(Subcommand)]
enum RomCommand {
    /// Replay the validation paths with a reduced model.
    Run {
        /// Run the Galerkin ROM (records residuals with --record-residuals).
        #[arg(long)]
        galerkin: bool,
        /// Run the hyperreduced ROM.
        #[arg(long)]
        hyper: bool,
        /// Record residual iterates on the training paths (Galerkin only).
        #[arg(long)]
        record_residuals: bool,
        /// Diverged-step budget before exit code 4.
        #[arg(long)]
        budget: Option<usize>,
        /// Newton iteration cap override for this run.
        #[arg(long)]
        max_iter: Option<usize>,
        /// Replay the textbook sign convention in the LSPG update.
        #[arg(long)]
        paper_sign: bool,
    },
}

#[derive(Args)]
struct SweepArgs {
    /// Comma-separated reduction methods (pod,lpod,pm,lle).
    #[arg(long)]
    method: Option<String>,
    /// Comma-separated hyperreduction methods (deim,lehm,lspg).
    #[arg(long)]
    hyper: Option<String>,
    /// Comma-separated online dimensions.
    #[arg(long)]
    d: Option<String>,
    /// Comma-separated magic point counts.
    #[arg(long)]
    m: Option<String>,
}

fn parse_usize_list(flag: &str, raw: &Option<String>) -> Result<Vec<usize>, CliError> {
    let Some(raw) = raw else { return Ok(Vec::new()) };
    config::split_list(raw)
        .iter()
        .map(|t| {
            t.parse::<usize>()
                .map_err(|_| CliError::Config(format!("--{flag} expects integers, got {t:?}")))
        })
        .collect()
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = load_config(cli.config.as_deref())?;
    if let Some(out) = cli.out {
        cfg.out = out;
    }
    if let Some(t) = cli.threads {
        cfg.threads = t;
    }
    if cfg.threads > 0 {
        // Ignores the error when a pool already exists (tests call run twice).
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build_global();
    }
    let ctx = Ctx {
        out: cfg.out.clone(),
        threads: rayon::current_num_threads(),
        seed_flag: cli.seed,
        cfg,
    };

    match cli.command {
        Command::Mesh { divisions, edge_length } => stages::cmd_mesh(&ctx, divisions, edge_length),
        Command::Fom { command: FomCommand::Run { paths, train_paths, steps, dlp, dls } } => {
            stages::cmd_fom_run(
                &ctx,
                stages::FomOverrides { paths, train_paths, steps, dlp, dls },
            )
        }
        Command::Train { command } => match command {
            TrainCommand::Reduce {
                method,
                d,
                d_bar,
                k,
                n_chart,
                n_clusters,
                overlap,
                d_tilde,
            } => stages::cmd_train_reduce(
                &ctx,
                stages::ReduceOverrides {
                    method,
                    d,
                    d_bar,
                    k,
                    n_chart,
                    n_clusters,
                    overlap,
                    d_tilde,
                },
            ),
            TrainCommand::Hyper { method, m, lehm_eps } => {
                stages::cmd_train_hyper(&ctx, method, m, lehm_eps)
            }
        },
        Command::Rom { command } => match command {
            RomCommand::Run { galerkin, hyper, record_residuals, budget, max_iter, paper_sign } => {
                if galerkin == hyper {
                    return Err(CliError::Config(
                        "rom run needs exactly one of --galerkin or --hyper".into(),
                    )
                    .into());
                }
                if galerkin {
                    if paper_sign {
                        return Err(CliError::Config(
                            "--paper-sign only applies to --hyper runs".into(),
                        )
                        .into());
                    }
                    stages::cmd_rom_galerkin(&ctx, record_residuals, budget, max_iter)
                } else {
                    if record_residuals {
                        return Err(CliError::Config(
                            "--record-residuals only applies to --galerkin runs".into(),
                        )
                        .into());
                    }
                    stages::cmd_rom_hyper(&ctx, budget, max_iter, paper_sign)
                }
            }
        },
        Command::Sweep(args) => {
            let methods = args.method.as_deref().map(config::split_list).unwrap_or_default();
            let hypers = args.hyper.as_deref().map(config::split_list).unwrap_or_default();
            let ds = parse_usize_list("d", &args.d)?;
            let ms = parse_usize_list("m", &args.m)?;
            stages::cmd_sweep(&ctx, methods, hypers, ds, ms)
        }
        Command::Diag { r_points, r_min, r_max } => stages::cmd_diag(&ctx, r_points, r_min, r_max),
        Command::Verify { stage } => stages::cmd_verify(&ctx, stage),
    }
}

/// Maps an error chain to the documented exit codes.
fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(cli) = cause.downcast_ref::<CliError>() {
            return match cli {
                CliError::Config(_) => 2,
                CliError::MissingStage { .. } => 3,
                CliError::DivergenceBudget { .. } => 4,
                CliError::Verification(_) => 5,
            };
        }
        if let Some(lib) = cause.downcast_ref::<hyperrom::Error>() {
            use hyperrom::Error as E;
            return match lib {
                E::InvalidConfig(_)
                | E::InvalidMesh(_)
                | E::InvalidMaterial(_)
                | E::IncompressibleLimit { .. }
                | E::GeometricMismatch(_)
                | E::Dimension(_)
                | E::InsufficientRank(_)
                | E::EmptyCluster { .. }
                | E::PathSampling { .. } => 2,
                E::MissingArtifact(_) => 3,
                E::HashMismatch { .. }
                | E::BadMagic { .. }
                | E::BadBlockLayout { .. }
                | E::BlockTruncated { .. }
                | E::Json(_) => 5,
                _ => 1,
            };
        }
    }
    1
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        eprintln!("error: {err:#}");
        std::process::exit(exit_code(&err));
    }
}
