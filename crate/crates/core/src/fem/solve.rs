//! Newton-Raphson RVE solve with load stepping and bisection.

use std::time::Instant;

use nalgebra::{DVector, Matrix3};

use crate::error::{Error, Result};

use super::sparse::Factor;
use super::{assemble, AssembleParts, FullState, Rve, Timings};

/// Solver knobs; `tol_red` applies to reduced/hyperreduced solves.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct NewtonOpts {
    /// Convergence threshold on max|g|.
    pub tol: f64,
    /// Convergence threshold on max|g_red| for reduced solves.
    pub tol_red: f64,
    pub max_iter: usize,
    pub load_steps: usize,
    pub max_bisections: usize,
}

impl Default for NewtonOpts {
    fn default() -> Self {
        NewtonOpts {
            tol: 1e-8,
            tol_red: 1e-8,
            max_iter: 25,
            load_steps: 1,
            max_bisections: 5,
        }
    }
}

/// One recorded Newton iterate.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct IterRecord {
    /// 1-based load step within the solve.
    pub load_step: usize,
    /// 0-based Newton iteration within the load step.
    pub iter: usize,
    /// max|g| at the iterate (full), or max|g_red| for reduced solves.
    pub res: f64,
}

/// Iteration history and timing breakdown of one solve.
#[derive(Debug, Clone, Default, serde::Serialize)]
pub struct Trace {
    pub iters: Vec<IterRecord>,
    /// Number of linear solves performed.
    pub newton_iters: usize,
    pub bisections: usize,
    pub timings: Timings,
}

/// Terminal status of a solve; divergence is an outcome, not an error.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize)]
pub enum SolveStatus {
    Converged,
    Diverged { reason: String },
}

impl SolveStatus {
    pub fn is_converged(&self) -> bool {
        matches!(self, SolveStatus::Converged)
    }
}

/// Result of a full-order solve.
pub struct FomSolve {
    pub state: FullState,
    pub status: SolveStatus,
    pub trace: Trace,
}

enum StepOutcome {
    Converged(DVector<f64>),
    Inverted,
    MaxIter,
    Singular(String),
}

fn newton_at(
    rve: &Rve,
    fbar: &Matrix3<f64>,
    u_start: &DVector<f64>,
    opts: &NewtonOpts,
    load_step: usize,
    trace: &mut Trace,
) -> Result<StepOutcome> {
    let mut u = u_start.clone();
    for iter in 0..=opts.max_iter {
        let t0 = Instant::now();
        let asm = match assemble(rve, &FullState { u: u.clone(), fbar: *fbar }, AssembleParts::newton())
        {
            Ok(asm) => asm,
            Err(Error::InvertedElement { .. }) => return Ok(StepOutcome::Inverted),
            Err(e) => return Err(e),
        };
        trace.timings.assembly += t0.elapsed().as_secs_f64();

        let res = asm.g.amax();
        trace.iters.push(IterRecord {
            load_step,
            iter,
            res,
        });
        if res <= opts.tol {
            return Ok(StepOutcome::Converged(u));
        }
        if iter == opts.max_iter {
            return Ok(StepOutcome::MaxIter);
        }

        let t0 = Instant::now();
        let k = asm.k.as_ref().expect("stiffness requested");
        let du = match Factor::new(k).and_then(|f| f.solve_vec(&(-&asm.g))) {
            Ok(du) => du,
            Err(Error::Singular(msg)) => return Ok(StepOutcome::Singular(msg)),
            Err(e) => return Err(e),
        };
        trace.timings.linear_solve += t0.elapsed().as_secs_f64();
        trace.newton_iters += 1;

        u += du;
    }
    unreachable!("loop returns at max_iter");
}

/// Solves for the fluctuation at `fbar_target` starting from the reference
/// state, with linear load stepping.
pub fn newton_solve(rve: &Rve, fbar_target: &Matrix3<f64>, opts: &NewtonOpts) -> Result<FomSolve> {
    newton_solve_from(
        rve,
        &Matrix3::identity(),
        &DVector::zeros(rve.n_dofs()),
        fbar_target,
        opts,
    )
}

/// Solves for the fluctuation at `fbar_target` starting from a converged
/// state `(fbar_start, u_start)`.
///
/// The macroscopic gradient is interpolated linearly from start to target
/// over `opts.load_steps` increments. An inverted element or a stalled
/// Newton loop halves the current increment; after `opts.max_bisections`
/// halvings the solve reports divergence.
pub fn newton_solve_from(
    rve: &Rve,
    fbar_start: &Matrix3<f64>,
    u_start: &DVector<f64>,
    fbar_target: &Matrix3<f64>,
    opts: &NewtonOpts,
) -> Result<FomSolve> {
    assert!(opts.tol > 0.0 && opts.load_steps >= 1);
    let mut trace = Trace::default();
    let mut u = u_start.clone();
    let delta = fbar_target - fbar_start;

    let mut t_done = 0.0f64;
    let mut dt = 1.0 / opts.load_steps as f64;
    let mut load_step = 0usize;

    while t_done < 1.0 - 1e-12 {
        let t_try = (t_done + dt).min(1.0);
        let fbar = fbar_start + t_try * delta;
        load_step += 1;

        match newton_at(rve, &fbar, &u, opts, load_step, &mut trace)? {
            StepOutcome::Converged(u_new) => {
                u = u_new;
                t_done = t_try;
            }
            failure => {
                trace.bisections += 1;
                if trace.bisections > opts.max_bisections {
                    let reason = match failure {
                        StepOutcome::Inverted => "inverted element".to_string(),
                        StepOutcome::MaxIter => format!("no convergence in {} iterations", opts.max_iter),
                        StepOutcome::Singular(msg) => msg,
                        StepOutcome::Converged(_) => unreachable!(),
                    };
                    return Ok(FomSolve {
                        state: FullState {
                            u,
                            fbar: fbar_start + t_done * delta,
                        },
                        status: SolveStatus::Diverged {
                            reason: format!("{reason} after {} bisections", opts.max_bisections),
                        },
                        trace,
                    });
                }
                dt *= 0.5;
            }
        }
    }

    Ok(FomSolve {
        state: FullState {
            u,
            fbar: *fbar_target,
        },
        status: SolveStatus::Converged,
        trace,
    })
}
