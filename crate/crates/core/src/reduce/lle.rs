//! Locally linear embedding and per-step local charts.
//!
//! Offline, LLE learns a d-dimensional embedding of the snapshots in three
//! steps: a k-nearest-neighbor graph in R^D, reconstruction weights per
//! snapshot minimizing `|u_i - sum_j W_ij u_j|^2` under the sum-to-one
//! constraint, and the bottom eigenvectors of `M = (I - W)^T (I - W)`
//! (skipping the constant one) as the embedding coordinates.
//!
//! The weight rows solve the constrained local Gram system through its KKT
//! form, which reproduces exactly affinely reconstructible points to
//! rounding error; a ridge of `1e-3 trace(C)/k` is added only when the KKT
//! system is degenerate (duplicate snapshots, over-complete neighborhoods).
//!
//! Online, the map from embedding coordinates back to displacements is
//! linearized per load step by a local chart fit to the N parameter-nearest
//! snapshots. Charts live in the intermediate POD space of dimension dbar
//! (lossless at dbar = s), so their cost never scales with D:
//!
//! ```text
//! phitilde = Ybar_N W_N Y_N^T (Y_N W_N Y_N^T)^{-1},   W_N = I - (1/N) 1 1^T
//! u0bar    = mean(Ybar_N) - phitilde mean(Y_N)
//! ```
//!
//! and the full-space chart, when needed, is `phi = phibar phitilde`,
//! `u0 = phibar u0bar`.

use nalgebra::{DMatrix, DVector, Matrix3};

use crate::error::{Error, Result};
use crate::linalg::lstsq;

use super::pod::pod_fit;
use super::SnapshotSet;

/// A fitted LLE model with its intermediate compression.
pub struct LleModel {
    /// D x s snapshots retained for diagnostics and chart validation.
    pub u: DMatrix<f64>,
    /// Load parameters per snapshot, the chart neighbor-search space.
    pub params: Vec<Matrix3<f64>>,
    /// k-nearest-neighbor graph, `neighbors[i]` sorted by (distance, index).
    pub neighbors: Vec<Vec<usize>>,
    /// s x s reconstruction weights, row i supported on `neighbors[i]`.
    pub w: DMatrix<f64>,
    /// d x s embedding, rows mean-zero with unit covariance.
    pub y: DMatrix<f64>,
    /// D x dbar intermediate POD basis.
    pub phibar: DMatrix<f64>,
    /// dbar x s intermediate coordinates, `phibar^T U`.
    pub ybar: DMatrix<f64>,
    pub k: usize,
    pub d: usize,
}

/// A per-step linearization of the embedding-to-displacement map, expressed
/// in intermediate coordinates.
#[derive(Debug, Clone)]
pub struct LocalChart {
    /// dbar x d tangent.
    pub phitilde: DMatrix<f64>,
    /// Intermediate-space offset, length dbar.
    pub u0: DVector<f64>,
    /// The N snapshots the chart was fit on.
    pub neighbor_ids: Vec<usize>,
    /// Relative residual of the chart normal equations.
    pub ne_residual: f64,
    /// Whether degenerate neighbor geometry forced a ridge.
    pub ridged: bool,
}

impl LocalChart {
    /// Intermediate-space reconstruction `phitilde y + u0`.
    pub fn map(&self, y: &DVector<f64>) -> DVector<f64> {
        &self.phitilde * y + &self.u0
    }

    /// Full-space tangent `phibar phitilde`.
    pub fn full_phi(&self, phibar: &DMatrix<f64>) -> DMatrix<f64> {
        phibar * &self.phitilde
    }

    /// Full-space offset `phibar u0`.
    pub fn full_u0(&self, phibar: &DMatrix<f64>) -> DVector<f64> {
        phibar * &self.u0
    }
}

/// Sorted k-nearest-neighbor lists by Euclidean distance, self excluded,
/// ties broken by snapshot index.
fn knn(u: &DMatrix<f64>, k: usize) -> Vec<Vec<usize>> {
    let s = u.ncols();
    (0..s)
        .map(|i| {
            let mut order: Vec<(f64, usize)> = (0..s)
                .filter(|&j| j != i)
                .map(|j| ((u.column(i) - u.column(j)).norm_squared(), j))
                .collect();
            order.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            order.truncate(k);
            order.into_iter().map(|(_, j)| j).collect()
        })
        .collect()
}

/// Solves the sum-to-one weight problem `min w^T C w, 1^T w = 1` for one
/// neighborhood.
///
/// When the Gram matrix has at most a one-dimensional near-null space the
/// KKT system is nonsingular and is solved exactly, which reproduces
/// affinely reconstructible points to rounding error. Overcomplete or
/// duplicate neighborhoods (near-null dimension >= 2) make the weights
/// ill-posed; there the Gram matrix is ridged by `1e-3 trace(C)/k` first.
fn weight_row(c: &DMatrix<f64>) -> (DVector<f64>, bool) {
    let k = c.nrows();
    let solve = |gram: &DMatrix<f64>| -> Option<DVector<f64>> {
        let mut kkt = DMatrix::zeros(k + 1, k + 1);
        kkt.view_mut((0, 0), (k, k)).copy_from(gram);
        for j in 0..k {
            kkt[(k, j)] = 1.0;
            kkt[(j, k)] = 1.0;
        }
        let mut rhs = DVector::zeros(k + 1);
        rhs[k] = 1.0;
        let sol = kkt.lu().solve(&rhs)?;
        let w = sol.rows(0, k).into_owned();
        if w.iter().all(|v| v.is_finite()) && w.amax() <= 1e6 {
            Some(w)
        } else {
            None
        }
    };
    let eigs = c.clone().symmetric_eigenvalues();
    let lam_max = eigs.max().max(f64::MIN_POSITIVE);
    let near_null = eigs.iter().filter(|&&l| l < 1e-10 * lam_max).count();
    if near_null <= 1 {
        if let Some(w) = solve(c) {
            return (w, false);
        }
    }
    let ridge = 1e-3 * c.trace() / k as f64 + 1e-12;
    let ridged = c + DMatrix::<f64>::identity(k, k) * ridge;
    let mut w = solve(&ridged).unwrap_or_else(|| DVector::from_element(k, 1.0 / k as f64));
    let total: f64 = w.sum();
    if total.abs() > 1e-14 {
        w /= total;
    }
    (w, true)
}

/// Fits an LLE model: neighbor graph, reconstruction weights, embedding,
/// and the intermediate POD compression.
pub fn lle_fit(snaps: &SnapshotSet, k: usize, d: usize, d_bar: usize) -> Result<LleModel> {
    let u = &snaps.u;
    let (big_d, s) = u.shape();
    if k == 0 || k >= s {
        return Err(Error::InvalidConfig(format!("k = {k} outside 1..s = {s}")));
    }
    if d == 0 || d > k || d + 1 > s {
        return Err(Error::InvalidConfig(format!(
            "embedding dimension d = {d} needs 1 <= d <= k and d < s"
        )));
    }
    let d_bar = d_bar.clamp(1, s.min(big_d));

    let neighbors = knn(u, k);
    let mut w = DMatrix::zeros(s, s);
    for (i, nbrs) in neighbors.iter().enumerate() {
        let mut z = DMatrix::zeros(big_d, k);
        for (col, &j) in nbrs.iter().enumerate() {
            z.set_column(col, &(u.column(j) - u.column(i)));
        }
        let c = z.transpose() * &z;
        let (wi, _) = weight_row(&c);
        for (col, &j) in nbrs.iter().enumerate() {
            w[(i, j)] = wi[col];
        }
    }

    // Embedding from the bottom of the spectrum of M = (I - W)^T (I - W).
    let iw = DMatrix::<f64>::identity(s, s) - &w;
    let m = iw.transpose() * &iw;
    let eig = nalgebra::SymmetricEigen::new(m);
    let mut order: Vec<usize> = (0..s).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].partial_cmp(&eig.eigenvalues[b]).unwrap());
    let mut y = DMatrix::zeros(d, s);
    for (row, &idx) in order[1..=d].iter().enumerate() {
        let mut v = eig.eigenvectors.column(idx).into_owned();
        // Deterministic sign: the largest-magnitude entry is positive.
        let mut pivot = 0;
        for (i, val) in v.iter().enumerate() {
            if val.abs() > v[pivot].abs() {
                pivot = i;
            }
        }
        if v[pivot] < 0.0 {
            v = -v;
        }
        // Unit-norm eigenvector to unit-covariance coordinate row.
        v *= (s as f64).sqrt();
        y.row_mut(row).copy_from(&v.transpose());
    }

    let phibar = pod_fit(u, d_bar)?.psi;
    let ybar = phibar.transpose() * u;

    Ok(LleModel {
        u: u.clone(),
        params: snaps.params.clone(),
        neighbors,
        w,
        y,
        phibar,
        ybar,
        k,
        d,
    })
}

/// Fits a chart to explicitly supplied coordinate pairs. The centering
/// matrix `W_N = I - (1/N) 1 1^T` is applied through mean subtraction.
pub fn chart_from_pairs(
    ybar_n: &DMatrix<f64>,
    y_n: &DMatrix<f64>,
    neighbor_ids: Vec<usize>,
) -> Result<LocalChart> {
    let d = y_n.nrows();
    let n = y_n.ncols();
    if ybar_n.ncols() != n || n < d + 1 {
        return Err(Error::Dimension(format!(
            "chart needs N >= d + 1 aligned pairs, got N = {n}, d = {d}"
        )));
    }
    let y_mean = y_n.column_mean();
    let ybar_mean = ybar_n.column_mean();
    let mut yc = y_n.clone();
    let mut ybc = ybar_n.clone();
    for j in 0..n {
        yc.column_mut(j).axpy(-1.0, &y_mean, 1.0);
        ybc.column_mut(j).axpy(-1.0, &ybar_mean, 1.0);
    }
    let a = &yc * yc.transpose();
    let b = &ybc * yc.transpose();

    let mut ridged = false;
    let phitilde = match a.clone().cholesky() {
        Some(ch) => ch.solve(&b.transpose()).transpose(),
        None => {
            ridged = true;
            let ridge = 1e-10 * a.trace() / d as f64 + 1e-300;
            let ar = &a + DMatrix::<f64>::identity(d, d) * ridge;
            match ar.clone().cholesky() {
                Some(ch) => ch.solve(&b.transpose()).transpose(),
                None => lstsq(&ar, &b.transpose(), 1e-12).transpose(),
            }
        }
    };
    let ne_residual = (&phitilde * &a - &b).norm() / b.norm().max(f64::MIN_POSITIVE);
    let u0 = ybar_mean - &phitilde * y_mean;

    Ok(LocalChart {
        phitilde,
        u0,
        neighbor_ids,
        ne_residual,
        ridged,
    })
}

/// Builds the chart for a load step: the N parameter-nearest snapshots,
/// their (Y, Ybar) pairs, and the centered least-squares tangent.
pub fn local_chart(model: &LleModel, query: &Matrix3<f64>, n: usize) -> Result<LocalChart> {
    let s = model.y.ncols();
    if n < model.d + 1 || n > s {
        return Err(Error::InvalidConfig(format!(
            "chart neighbor count N = {n} outside {}..={s}",
            model.d + 1
        )));
    }
    let mut order: Vec<usize> = (0..s).collect();
    order.sort_by(|&a, &b| {
        let da = (model.params[a] - query).norm();
        let db = (model.params[b] - query).norm();
        da.partial_cmp(&db).unwrap().then(a.cmp(&b))
    });
    order.truncate(n);

    let mut y_n = DMatrix::zeros(model.d, n);
    let mut ybar_n = DMatrix::zeros(model.ybar.nrows(), n);
    for (col, &i) in order.iter().enumerate() {
        y_n.set_column(col, &model.y.column(i));
        ybar_n.set_column(col, &model.ybar.column(i));
    }
    chart_from_pairs(&ybar_n, &y_n, order)
}

/// Initial reduced coordinates for a step:
/// `y = argmin |phitilde y + u0 - ybar_prev|`, solved through the chart's
/// normal equations. Because the intermediate basis is orthonormal, this
/// equals the full-space projection argmin.
pub fn embed_init(chart: &LocalChart, ybar_prev: &DVector<f64>) -> Result<DVector<f64>> {
    let lhs = chart.phitilde.transpose() * &chart.phitilde;
    let rhs = chart.phitilde.transpose() * (ybar_prev - &chart.u0);
    match lhs.clone().cholesky() {
        Some(ch) => Ok(ch.solve(&rhs)),
        None => Ok(crate::linalg::lstsq_vec(&lhs, &rhs, 1e-12)),
    }
}
