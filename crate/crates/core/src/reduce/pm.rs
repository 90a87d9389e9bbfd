//! Quadratic polynomial manifold reduction.
//!
//! The approximation space is a quadratic graph over the leading POD
//! coordinates: with `Vbar` the first d POD modes and `Vtilde` the next
//! dtilde modes,
//!
//! ```text
//! u(y) = Vbar y + Vtilde Xi q(y),     q(y) = vec(y (x) y)
//! ```
//!
//! where q stacks the products column-major, `q[i + d j] = y_i y_j`, so
//! p = d^2. The coefficient matrix Xi (dtilde x p) and the training
//! coordinates y_i are fit by alternating minimization of
//!
//! ```text
//! J(Xi, {y_i}) = sum_i || u_i - Vbar y_i - Vtilde Xi q(y_i) ||^2
//! ```
//!
//! * Xi step: linear least squares, solved min-norm through an SVD.
//! * y step: damped Gauss-Newton per snapshot on the stacked residual
//!   rho(y) = [y - a_i; Xi q(y) - b_i] with a_i = Vbar^T u_i,
//!   b_i = Vtilde^T u_i, accepting a step only if it decreases |rho|^2.
//!
//! Both steps are non-increasing, so the recorded objective history is
//! monotone. Its first entry is the objective at Xi = 0, y_i = a_i, which
//! equals the rank-d POD tail energy.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::lstsq;

/// A fitted quadratic manifold.
pub struct PmModel {
    /// D x d linear basis (leading POD modes).
    pub vbar: DMatrix<f64>,
    /// D x dtilde quadratic-correction basis (next POD modes).
    pub vtilde: DMatrix<f64>,
    /// [vbar vtilde], the intermediate basis of the two-stage abstraction.
    pub vfull: DMatrix<f64>,
    /// dtilde x d^2 quadratic coefficients.
    pub xi: DMatrix<f64>,
    /// d x s training coordinates after the alternating fit.
    pub y: DMatrix<f64>,
    /// Objective value before each accepted update, monotone non-increasing.
    pub fit_history: Vec<f64>,
    /// Snapshots whose Gauss-Newton update diverged and kept their previous
    /// coordinates.
    pub flagged: Vec<usize>,
}

/// Quadratic feature vector, `q[i + d j] = y_i y_j`.
pub fn pm_q(y: &DVector<f64>) -> DVector<f64> {
    let d = y.len();
    let mut q = DVector::zeros(d * d);
    for j in 0..d {
        for i in 0..d {
            q[i + d * j] = y[i] * y[j];
        }
    }
    q
}

/// Jacobian of [`pm_q`], shape d^2 x d:
/// `dq[i + d j, k] = delta_ik y_j + y_i delta_jk`.
pub fn pm_dq(y: &DVector<f64>) -> DMatrix<f64> {
    let d = y.len();
    let mut dq = DMatrix::zeros(d * d, d);
    for j in 0..d {
        for i in 0..d {
            dq[(i + d * j, i)] += y[j];
            dq[(i + d * j, j)] += y[i];
        }
    }
    dq
}

impl PmModel {
    pub fn d(&self) -> usize {
        self.vbar.ncols()
    }

    pub fn d_tilde(&self) -> usize {
        self.vtilde.ncols()
    }

    /// Intermediate coordinates `ybar(y) = [y; Xi q(y)]`.
    pub fn ybar(&self, y: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.d() + self.d_tilde());
        out.rows_mut(0, self.d()).copy_from(y);
        out.rows_mut(self.d(), self.d_tilde())
            .copy_from(&(&self.xi * pm_q(y)));
        out
    }

    /// Full-space reconstruction.
    pub fn decode(&self, y: &DVector<f64>) -> DVector<f64> {
        &self.vfull * self.ybar(y)
    }

    /// Exact embedding for on-manifold vectors: vbar is orthogonal to
    /// vtilde, so `vbar^T u(y) = y`.
    pub fn embed(&self, u: &DVector<f64>) -> DVector<f64> {
        self.vbar.transpose() * u
    }
}

/// Chart tangent `d ybar / d y = [I; Xi dq(y)]`, shape (d + dtilde) x d.
pub fn pm_tangent(model: &PmModel, y: &DVector<f64>) -> DMatrix<f64> {
    let d = model.d();
    let dt = model.d_tilde();
    let mut t = DMatrix::zeros(d + dt, d);
    t.view_mut((0, 0), (d, d)).fill_with_identity();
    t.view_mut((d, 0), (dt, d)).copy_from(&(&model.xi * pm_dq(y)));
    t
}

fn objective(u: &DMatrix<f64>, model_v: &DMatrix<f64>, xi: &DMatrix<f64>, y: &DMatrix<f64>, d: usize) -> f64 {
    let mut total = 0.0;
    for i in 0..u.ncols() {
        let yi = y.column(i).into_owned();
        let mut ybar = DVector::zeros(model_v.ncols());
        ybar.rows_mut(0, d).copy_from(&yi);
        ybar.rows_mut(d, model_v.ncols() - d).copy_from(&(xi * pm_q(&yi)));
        total += (u.column(i) - model_v * ybar).norm_squared();
    }
    total
}

/// Fits a quadratic manifold by alternating minimization.
pub fn pm_fit(
    u: &DMatrix<f64>,
    d: usize,
    d_tilde: usize,
    max_iters: usize,
    tol: f64,
) -> Result<PmModel> {
    let (nrows, s) = u.shape();
    let dbar = d + d_tilde;
    if d == 0 || d_tilde == 0 || dbar > nrows.min(s) {
        return Err(Error::InvalidConfig(format!(
            "manifold dimensions d = {d}, dtilde = {d_tilde} need 0 < d + dtilde <= min({nrows}, {s})"
        )));
    }
    let svd = u.clone().svd(true, false);
    let left = svd
        .u
        .ok_or_else(|| Error::Singular("SVD did not return left singular vectors".into()))?;
    let vbar = left.columns(0, d).into_owned();
    let vtilde = left.columns(d, d_tilde).into_owned();
    let mut vfull = DMatrix::zeros(nrows, dbar);
    vfull.columns_mut(0, d).copy_from(&vbar);
    vfull.columns_mut(d, d_tilde).copy_from(&vtilde);

    // Projected data: u_i = vbar a_i + vtilde b_i + (orthogonal remainder).
    let a = vbar.transpose() * u;
    let b = vtilde.transpose() * u;

    let mut y = a.clone();
    let mut xi = DMatrix::<f64>::zeros(d_tilde, d * d);
    let mut history = vec![objective(u, &vfull, &xi, &y, d)];
    let mut flagged = std::collections::BTreeSet::new();

    for _ in 0..max_iters {
        // Xi step: min-norm least squares over all coefficients at fixed y.
        let mut q = DMatrix::zeros(d * d, s);
        for i in 0..s {
            q.set_column(i, &pm_q(&y.column(i).into_owned()));
        }
        let xit = lstsq(&q.transpose(), &b.transpose(), 1e-12);
        xi = xit.transpose();

        // y step: per-snapshot damped Gauss-Newton.
        for i in 0..s {
            let ai = a.column(i).into_owned();
            let bi = b.column(i).into_owned();
            let rho2 = |yv: &DVector<f64>| -> f64 {
                (yv - &ai).norm_squared() + (&xi * pm_q(yv) - &bi).norm_squared()
            };
            let mut yi = y.column(i).into_owned();
            let mut f = rho2(&yi);
            for _ in 0..10 {
                if f < 1e-28 {
                    break;
                }
                let jq = &xi * pm_dq(&yi);
                let rq = &xi * pm_q(&yi) - &bi;
                // Normal equations of the stacked system [I; jq] dy = -[yi - ai; rq].
                let lhs = DMatrix::identity(d, d) + jq.transpose() * &jq;
                let rhs = -((&yi - &ai) + jq.transpose() * rq);
                let dy = match lhs.clone().cholesky() {
                    Some(ch) => ch.solve(&rhs),
                    None => crate::linalg::lstsq_vec(&lhs, &rhs, 1e-12),
                };
                let cand = &yi + &dy;
                let fc = rho2(&cand);
                if !fc.is_finite() {
                    flagged.insert(i);
                    break;
                }
                if fc < f {
                    yi = cand;
                    f = fc;
                } else {
                    break;
                }
            }
            y.set_column(i, &yi);
        }

        let obj = objective(u, &vfull, &xi, &y, d);
        let prev = *history.last().unwrap();
        history.push(obj.min(prev));
        if prev - obj <= tol * prev.max(f64::MIN_POSITIVE) {
            break;
        }
    }

    Ok(PmModel {
        vbar,
        vtilde,
        vfull,
        xi,
        y,
        fit_history: history,
        flagged: flagged.into_iter().collect(),
    })
}
