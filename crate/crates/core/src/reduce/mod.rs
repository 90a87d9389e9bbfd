//! Offline approximation spaces and online local linearization.
//!
//! Four snapshot-based reductions are provided, all exposed through one
//! two-stage abstraction so the Galerkin and hyperreduced solvers never
//! branch on the method:
//!
//! * an intermediate orthonormal basis `phibar` (D x dbar) compressing the
//!   snapshots losslessly (or nearly so), and
//! * a per-step map from reduced coordinates `y` (length d) to intermediate
//!   coordinates `ybar` (length dbar), affine for POD/LPOD/LLE charts and
//!   quadratic for the polynomial manifold.
//!
//! The full-space reconstruction is always `u = phibar * ybar(y)`, and the
//! chart tangent `phibar * phitilde(y)` is what enters the reduced systems.
//!
//! | method | phibar            | ybar(y)                     |
//! |--------|-------------------|-----------------------------|
//! | POD    | psi (d modes)     | y                           |
//! | LPOD   | psi_c per cluster | y                           |
//! | PM     | [Vbar Vtilde]     | [y; Xi vec(y (x) y)]        |
//! | LLE    | dbar POD modes    | phitilde y + u0 (per step)  |

mod lle;
mod lpod;
mod pm;
mod pod;

pub use lle::{chart_from_pairs, embed_init, lle_fit, local_chart, LleModel, LocalChart};
pub use lpod::{lpod_fit, lpod_select, lpod_select_by_param, LpodModel};
pub use pm::{pm_fit, pm_dq, pm_q, pm_tangent, PmModel};
pub use pod::{pod_fit, PodBasis};

use nalgebra::{DMatrix, Matrix3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Converged FOM solutions with their load parameters.
#[derive(Debug, Clone)]
pub struct SnapshotSet {
    /// D x s snapshot matrix.
    pub u: DMatrix<f64>,
    /// Macroscopic deformation gradient per column.
    pub params: Vec<Matrix3<f64>>,
    pub path_id: Vec<usize>,
    pub step_id: Vec<usize>,
}

impl SnapshotSet {
    pub fn new(d: usize) -> Self {
        SnapshotSet {
            u: DMatrix::zeros(d, 0),
            params: Vec::new(),
            path_id: Vec::new(),
            step_id: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.u.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn push(&mut self, u: &nalgebra::DVector<f64>, fbar: Matrix3<f64>, path: usize, step: usize) {
        let s = self.u.ncols();
        self.u = self.u.clone().insert_column(s, 0.0);
        self.u.set_column(s, u);
        self.params.push(fbar);
        self.path_id.push(path);
        self.step_id.push(step);
    }

    pub fn validate(&self) -> Result<()> {
        if self.len() < 2 {
            return Err(Error::InsufficientRank(format!(
                "snapshot set has {} columns, need at least 2",
                self.len()
            )));
        }
        if self.params.len() != self.len() || self.path_id.len() != self.len() {
            return Err(Error::Dimension("snapshot metadata misaligned".into()));
        }
        if self.u.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("non-finite snapshot entries".into()));
        }
        Ok(())
    }

    /// Indices of the `n` columns whose parameters are Frobenius-nearest to
    /// `query`, ties broken by column index.
    pub fn nearest_by_param(&self, query: &Matrix3<f64>, n: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by(|&a, &b| {
            let da = (self.params[a] - query).norm();
            let db = (self.params[b] - query).norm();
            da.partial_cmp(&db).unwrap().then(a.cmp(&b))
        });
        order.truncate(n);
        order
    }
}

/// Reduction method selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReduceMethod {
    Pod,
    Lpod,
    Pm,
    Lle,
}

impl std::fmt::Display for ReduceMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ReduceMethod::Pod => "pod",
            ReduceMethod::Lpod => "lpod",
            ReduceMethod::Pm => "pm",
            ReduceMethod::Lle => "lle",
        };
        write!(f, "{s}")
    }
}

/// Hyperparameters for [`fit`]; zero-valued optional fields resolve to the
/// documented defaults.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ReduceParams {
    pub method: ReduceMethod,
    /// Online coordinate count d.
    pub d: usize,
    /// Intermediate dimension dbar; 0 means lossless (min(s, D)).
    pub d_bar: usize,
    /// LLE graph neighbor count k; 0 means max(12, d + 2).
    pub k: usize,
    /// Chart neighbor count N; 0 means 2 d.
    pub n_chart: usize,
    /// LPOD cluster count.
    pub n_clusters: usize,
    /// LPOD overlap snapshots borrowed per cluster.
    pub overlap: usize,
    /// PM quadratic dimension dtilde; 0 means d.
    pub d_tilde: usize,
    pub pm_max_iters: usize,
    pub pm_tol: f64,
    pub seed: u64,
}

impl ReduceParams {
    pub fn new(method: ReduceMethod, d: usize, seed: u64) -> Self {
        ReduceParams {
            method,
            d,
            d_bar: 0,
            k: 0,
            n_chart: 0,
            n_clusters: 4,
            overlap: 2,
            d_tilde: 0,
            pm_max_iters: 20,
            pm_tol: 1e-12,
            seed,
        }
    }

    pub fn resolved_k(&self, s: usize) -> usize {
        let k = if self.k == 0 {
            (self.d + 2).max(12)
        } else {
            self.k
        };
        k.min(s.saturating_sub(1))
    }

    pub fn resolved_n_chart(&self, s: usize) -> usize {
        let n = if self.n_chart == 0 { 2 * self.d } else { self.n_chart };
        n.clamp(self.d + 1, s)
    }

    pub fn resolved_d_bar(&self, d_full: usize, s: usize) -> usize {
        if self.d_bar == 0 {
            s.min(d_full)
        } else {
            self.d_bar.min(s.min(d_full))
        }
    }

    pub fn resolved_d_tilde(&self) -> usize {
        if self.d_tilde == 0 {
            self.d
        } else {
            self.d_tilde
        }
    }
}

/// A fitted approximation space.
pub enum ReducedModel {
    Pod(PodBasis),
    Lpod(LpodModel),
    Pm(PmModel),
    Lle(LleModel),
}

impl ReducedModel {
    /// Online coordinate count d.
    pub fn dim(&self) -> usize {
        match self {
            ReducedModel::Pod(b) => b.psi.ncols(),
            ReducedModel::Lpod(m) => m.d,
            ReducedModel::Pm(m) => m.vbar.ncols(),
            ReducedModel::Lle(m) => m.d,
        }
    }

    pub fn n_clusters(&self) -> usize {
        match self {
            ReducedModel::Lpod(m) => m.bases.len(),
            _ => 1,
        }
    }

    /// Intermediate basis `phibar` of the given cluster (D x dbar).
    pub fn basis(&self, cluster: usize) -> &DMatrix<f64> {
        match self {
            ReducedModel::Pod(b) => &b.psi,
            ReducedModel::Lpod(m) => &m.bases[cluster].psi,
            ReducedModel::Pm(m) => &m.vfull,
            ReducedModel::Lle(m) => &m.phibar,
        }
    }

    pub fn method(&self) -> ReduceMethod {
        match self {
            ReducedModel::Pod(_) => ReduceMethod::Pod,
            ReducedModel::Lpod(_) => ReduceMethod::Lpod,
            ReducedModel::Pm(_) => ReduceMethod::Pm,
            ReducedModel::Lle(_) => ReduceMethod::Lle,
        }
    }
}

/// Fits the selected reduction on a snapshot set.
pub fn fit(snaps: &SnapshotSet, params: &ReduceParams) -> Result<ReducedModel> {
    snaps.validate()?;
    let s = snaps.len();
    let d_full = snaps.u.nrows();
    if params.d == 0 || params.d > s.min(d_full) {
        return Err(Error::InvalidConfig(format!(
            "reduced dimension d = {} outside 1..=min(D, s) = {}",
            params.d,
            s.min(d_full)
        )));
    }
    match params.method {
        ReduceMethod::Pod => Ok(ReducedModel::Pod(pod_fit(&snaps.u, params.d)?)),
        ReduceMethod::Lpod => Ok(ReducedModel::Lpod(lpod_fit(
            snaps,
            params.n_clusters,
            params.d,
            params.overlap,
            params.seed,
        )?)),
        ReduceMethod::Pm => Ok(ReducedModel::Pm(pm_fit(
            &snaps.u,
            params.d,
            params.resolved_d_tilde(),
            params.pm_max_iters,
            params.pm_tol,
        )?)),
        ReduceMethod::Lle => Ok(ReducedModel::Lle(lle_fit(
            snaps,
            params.resolved_k(s),
            params.d,
            params.resolved_d_bar(d_full, s),
        )?)),
    }
}
