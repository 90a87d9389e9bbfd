//! Local POD: clustered snapshot bases with overlap.
//!
//! Snapshots are partitioned by k-means in the full space, each cluster is
//! augmented with the `overlap` nearest non-member snapshots to its centroid,
//! and a POD basis of rank d is fit per augmented cluster. Online, the active
//! cluster is the one whose centroid is nearest to the current reconstruction;
//! when the active cluster changes, coordinates carry over through the
//! precomputed cross-projection `psi_b^T psi_a`.

use nalgebra::{DMatrix, DVector, Matrix3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};

use super::pod::{pod_fit, PodBasis};
use super::SnapshotSet;

/// A fitted local POD model.
pub struct LpodModel {
    /// Cluster centroids, one D-vector per cluster.
    pub centroids: Vec<DVector<f64>>,
    /// Per-cluster POD bases on the overlap-augmented snapshot subsets.
    pub bases: Vec<PodBasis>,
    /// Hard cluster assignment of each snapshot (pre-augmentation).
    pub assignment: Vec<usize>,
    /// Macroscopic parameters of the snapshots, for parameter-space selection.
    pub params: Vec<Matrix3<f64>>,
    /// Reduced dimension shared by all clusters.
    pub d: usize,
    /// `cross[a][b] = psi_b^T psi_a`, carrying coordinates from cluster a to b.
    pub cross: Vec<Vec<DMatrix<f64>>>,
}

/// Squared Euclidean distance between a snapshot column and a centroid.
fn dist2(u: &DMatrix<f64>, col: usize, c: &DVector<f64>) -> f64 {
    u.column(col)
        .iter()
        .zip(c.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum()
}

/// k-means++ seeding: first centroid uniform, later centroids sampled with
/// probability proportional to squared distance from the nearest chosen one.
fn seed_centroids(u: &DMatrix<f64>, k: usize, rng: &mut ChaCha12Rng) -> Vec<DVector<f64>> {
    let s = u.ncols();
    let first = rng.random_range(0..s);
    let mut centroids = vec![u.column(first).into_owned()];
    let mut best = vec![f64::INFINITY; s];
    while centroids.len() < k {
        let newest = centroids.last().unwrap();
        for i in 0..s {
            best[i] = best[i].min(dist2(u, i, newest));
        }
        let total: f64 = best.iter().sum();
        let pick = if total <= 0.0 {
            rng.random_range(0..s)
        } else {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = s - 1;
            for (i, &w) in best.iter().enumerate() {
                target -= w;
                if target <= 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        };
        centroids.push(u.column(pick).into_owned());
    }
    centroids
}

fn assign(u: &DMatrix<f64>, centroids: &[DVector<f64>]) -> Vec<usize> {
    (0..u.ncols())
        .map(|i| {
            let mut best = 0;
            let mut bd = f64::INFINITY;
            for (c, cen) in centroids.iter().enumerate() {
                let d = dist2(u, i, cen);
                if d < bd {
                    bd = d;
                    best = c;
                }
            }
            best
        })
        .collect()
}

/// Lloyd iterations to a fixed point; an empty cluster aborts the attempt so
/// the caller can reseed.
fn lloyd(
    u: &DMatrix<f64>,
    mut centroids: Vec<DVector<f64>>,
) -> Option<(Vec<DVector<f64>>, Vec<usize>)> {
    let k = centroids.len();
    let mut assignment = assign(u, &centroids);
    for _ in 0..200 {
        let mut sums = vec![DVector::<f64>::zeros(u.nrows()); k];
        let mut counts = vec![0usize; k];
        for (i, &c) in assignment.iter().enumerate() {
            sums[c] += u.column(i);
            counts[c] += 1;
        }
        if counts.iter().any(|&n| n == 0) {
            return None;
        }
        for c in 0..k {
            centroids[c] = &sums[c] / counts[c] as f64;
        }
        let next = assign(u, &centroids);
        if next == assignment {
            return Some((centroids, assignment));
        }
        assignment = next;
    }
    Some((centroids, assignment))
}

/// Fits local POD with `n_clusters` clusters of reduced dimension d each.
pub fn lpod_fit(
    snaps: &SnapshotSet,
    n_clusters: usize,
    d: usize,
    overlap: usize,
    seed: u64,
) -> Result<LpodModel> {
    let u = &snaps.u;
    let s = u.ncols();
    if n_clusters == 0 || n_clusters > s {
        return Err(Error::InvalidConfig(format!(
            "cluster count {n_clusters} outside 1..=s = {s}"
        )));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let retries = 5;
    let mut result = None;
    for _ in 0..=retries {
        let centroids = seed_centroids(u, n_clusters, &mut rng);
        if let Some(ok) = lloyd(u, centroids) {
            result = Some(ok);
            break;
        }
    }
    let (centroids, assignment) = result.ok_or(Error::EmptyCluster { retries })?;

    let mut bases = Vec::with_capacity(n_clusters);
    for c in 0..n_clusters {
        let mut members: Vec<usize> = (0..s).filter(|&i| assignment[i] == c).collect();
        let mut outsiders: Vec<usize> = (0..s).filter(|&i| assignment[i] != c).collect();
        outsiders.sort_by(|&a, &b| {
            dist2(u, a, &centroids[c])
                .partial_cmp(&dist2(u, b, &centroids[c]))
                .unwrap()
                .then(a.cmp(&b))
        });
        members.extend(outsiders.into_iter().take(overlap));
        members.sort_unstable();
        if members.len() < d {
            return Err(Error::InsufficientRank(format!(
                "cluster {c} holds {} snapshots including overlap, fewer than d = {d}",
                members.len()
            )));
        }
        let mut local = DMatrix::zeros(u.nrows(), members.len());
        for (j, &i) in members.iter().enumerate() {
            local.set_column(j, &u.column(i));
        }
        bases.push(pod_fit(&local, d)?);
    }

    let mut cross = vec![vec![DMatrix::zeros(d, d); n_clusters]; n_clusters];
    for (a, row) in cross.iter_mut().enumerate() {
        for (b, entry) in row.iter_mut().enumerate() {
            *entry = bases[b].psi.transpose() * &bases[a].psi;
        }
    }

    Ok(LpodModel {
        centroids,
        bases,
        assignment,
        params: snaps.params.clone(),
        d,
        cross,
    })
}

impl LpodModel {
    /// Cluster whose centroid is nearest to a full-space vector.
    pub fn select(&self, u: &DVector<f64>) -> usize {
        let mut best = 0;
        let mut bd = f64::INFINITY;
        for (c, cen) in self.centroids.iter().enumerate() {
            let d = (u - cen).norm_squared();
            if d < bd {
                bd = d;
                best = c;
            }
        }
        best
    }

    /// Carries reduced coordinates from cluster `from` to cluster `to`.
    pub fn carry(&self, y: &DVector<f64>, from: usize, to: usize) -> DVector<f64> {
        if from == to {
            y.clone()
        } else {
            &self.cross[from][to] * y
        }
    }
}

/// Cluster selection by nearest centroid to a reconstruction.
pub fn lpod_select(model: &LpodModel, u: &DVector<f64>) -> usize {
    model.select(u)
}

/// Cluster selection by the parameter-nearest snapshot's cluster, used where
/// no full-space reconstruction is available.
pub fn lpod_select_by_param(model: &LpodModel, fbar: &Matrix3<f64>) -> usize {
    let mut best = 0;
    let mut bd = f64::INFINITY;
    for (i, p) in model.params.iter().enumerate() {
        let d = (p - fbar).norm_squared();
        if d < bd {
            bd = d;
            best = i;
        }
    }
    model.assignment[best]
}
