//! Hyperreduction: magic points, DEIM/LEHM/LSPG steps, nonnegative
//! quadrature weights and the restricted online pipeline.
//!
//! Galerkin reduction shrinks the linear systems to d unknowns but still
//! assembles all |E| elements. Hyperreduction removes that last full-size
//! operation by assembling only m selected rows (magic points) of the
//! residual, stiffness and sensitivity, restricted to the elements `E_m`
//! that touch a magic DOF:
//!
//! ```text
//! DEIM   g ~ Omega (Z^T Omega)^-1 g_m         M from interpolation
//! LEHM   g ~ G G_m^T (G_m G_m^T + eps I)^-1 g_m    M from least squares
//! LSPG   min_dy || (K_m phi) dy + g_m ||      no reconstruction at all
//! ```
//!
//! with `Z` the magic-point selector and `G` the matrix of residual
//! snapshots gathered from Galerkin ROM Newton iterates (converged and
//! intermediate). The left factor `phibar^T M` is precomputed offline, so
//! one online iteration costs a restricted reconstruction O(|I_m| dbar),
//! a restricted assembly O(|E_m| C_e), projections O(dbar m d) and a dense
//! d x d solve. Nothing scales with D or |E|.
//!
//! Volume integrals (homogenized stress and the Voigt term of the
//! consistent tangent) are likewise restricted to `E_m` and extrapolated
//! with nonnegative element weights `xi` fitted on training stress data;
//! the normalization 1/V is absorbed into `xi`.

mod assemble;
mod fit;
mod select;
mod solve;

pub use assemble::{stress_snapshots, hyper_assemble, HyperAssembled, HyperParts, StressSnapshots};
pub use fit::{deim_fit, fit_xi, lehm_fit, nnls, DeimModel, LehmModel, XiWeights};
pub use select::{magic_points, select_magic_indices, select_magic_points, MagicPoints};
pub use solve::{
    build_hyper_model, hyper_homogenize, hyper_newton_step_deimlike, hyper_newton_step_lspg,
    run_hyper_rve, volumetric_xi, HyperMethod, HyperModel, HyperRun, HyperRunConfig,
    HyperStepReport, LspgStep,
};
