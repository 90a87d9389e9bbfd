//! Hyperreduced projection-based model order reduction for periodic
//! hyperelastic RVE homogenization.
//!
//! The crate implements the full offline/online workflow for quasi-static
//! first-order homogenization of a representative volume element (RVE)
//! under prescribed macroscopic deformation gradients:
//!
//! 1. [`mesh`]: structured hexahedral RVE meshes with spherical inclusions,
//!    trilinear shape functions and the periodic master/slave DOF map.
//! 2. [`material`]: compressible neo-Hookean energy, first Piola-Kirchhoff
//!    stress and the closed-form nominal tangent.
//! 3. [`fem`]: periodic assembly of residual, stiffness and sensitivity,
//!    Newton solves with load stepping, and consistent homogenization.
//! 4. [`reduce`]: snapshot-based approximation spaces (POD, local POD,
//!    quadratic polynomial manifolds, LLE) and local linear charts.
//! 5. [`galerkin`]: Galerkin-reduced Newton solves, reduced homogenization
//!    and the residual-snapshot recorder feeding hyperreduction.
//! 6. [`hyper`]: magic-point selection, DEIM/LEHM/LSPG hyperreduced steps,
//!    nonnegative quadrature weights and the restricted online pipeline
//!    whose per-iteration cost is independent of the full mesh size.
//! 7. [`bench`]: random load paths, campaign orchestration, error metrics,
//!    manifold diagnostics and d x m sweeps with runtime breakdowns.
//! 8. [`store`]: bit-exact binary matrix blocks and hashed JSON manifests.
//!
//! All randomness flows from a single master seed and every parallel
//! section reduces in a fixed order, so campaigns are reproducible
//! byte-for-byte at any thread count.

pub mod bench;
pub mod error;
#[cfg(test)]
mod testalloc;
pub mod fem;
pub mod galerkin;
pub mod hyper;
pub mod linalg;
pub mod material;
pub mod mesh;
pub mod reduce;
pub mod store;

pub use error::{Error, Result};
pub use fem::{Assembled, FullState, HomogenizedResponse, NewtonOpts, Rve, SolveStatus};
pub use material::{MaterialParams, Variant};
pub use mesh::{Inclusion, Mesh, MeshSpec, PeriodicMap};
pub use reduce::{ReducedModel, SnapshotSet};
