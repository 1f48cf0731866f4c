//! Dense strictly convex quadratic programs.
//!
//! ```text
//! minimize    ½ xᵀ H x + gᵀ x
//! subject to  lo_i ≤ a_iᵀ x ≤ hi_i
//! ```
//!
//! solved with the Goldfarb–Idnani dual active-set method. The method starts
//! at the unconstrained minimizer and only ever adds the most violated
//! constraint, so it needs no feasible starting point and handles the highly
//! degenerate constraint sets produced by sampled surfaces. The factorization
//! of the active set is rebuilt from scratch on every change; the problems
//! here have at most a few dozen variables.

use std::time::Instant;

use nalgebra::{Cholesky, DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq)]
pub struct DenseQp {
    pub hessian: DMatrix<f64>,
    pub linear: DVector<f64>,
    /// One constraint normal per row.
    pub rows: DMatrix<f64>,
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QpOptions {
    /// Largest accepted primal violation, in the units of the bounds.
    pub tol: f64,
    /// Cap on active-set changes.
    pub max_iter: usize,
}

impl Default for QpOptions {
    fn default() -> Self {
        Self {
            tol: 1e-9,
            max_iter: 500,
        }
    }
}

/// Which side of a row constraint is active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Lower,
    Upper,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ActiveConstraint {
    pub row: usize,
    pub side: Side,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub x: DVector<f64>,
    pub objective: f64,
    pub active: Vec<ActiveConstraint>,
    /// Non-negative multipliers, aligned with `active`.
    pub multipliers: Vec<f64>,
    pub iterations: usize,
    pub max_violation: f64,
    /// `‖Hx + g − Σ λ_i n_i‖∞`, with `n_i` the signed active normals.
    pub stationarity: f64,
    pub seconds: f64,
}

impl QpSolution {
    /// Multiplier of each row, signed: positive for an active lower side,
    /// negative for an active upper side, zero when inactive.
    pub fn row_multipliers(&self, rows: usize) -> DVector<f64> {
        let mut out = DVector::zeros(rows);
        for (a, lam) in self.active.iter().zip(&self.multipliers) {
            out[a.row] += match a.side {
                Side::Lower => *lam,
                Side::Upper => -*lam,
            };
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum QpError {
    #[error("hessian is not positive definite")]
    NotPositiveDefinite,
    #[error("dimension mismatch: {0}")]
    Dimension(&'static str),
    #[error("constraints are infeasible (row {row})")]
    Infeasible { row: usize },
    #[error("no convergence after {} active-set changes", .best.iterations)]
    MaxIterations { best: Box<QpSolution> },
}

impl DenseQp {
    pub fn num_vars(&self) -> usize {
        self.hessian.nrows()
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.hessian * x)) + self.linear.dot(x)
    }

    /// Largest violation of any row bound at `x`.
    pub fn max_violation(&self, x: &DVector<f64>) -> f64 {
        let ax = &self.rows * x;
        ax.iter()
            .enumerate()
            .map(|(i, v)| (self.lower[i] - v).max(v - self.upper[i]).max(0.0))
            .fold(0.0, f64::max)
    }

    fn check(&self) -> Result<(), QpError> {
        let n = self.num_vars();
        if self.hessian.ncols() != n || self.linear.len() != n {
            return Err(QpError::Dimension("hessian and linear term"));
        }
        if self.rows.ncols() != n && self.rows.nrows() > 0 {
            return Err(QpError::Dimension("constraint rows"));
        }
        let m = self.rows.nrows();
        if self.lower.len() != m || self.upper.len() != m {
            return Err(QpError::Dimension("constraint bounds"));
        }
        Ok(())
    }

    pub fn solve(&self, opts: &QpOptions) -> Result<QpSolution, QpError> {
        self.check()?;
        let start = Instant::now();
        let n = self.num_vars();
        let m = self.rows.nrows();
        let chol = Cholesky::new(self.hessian.clone()).ok_or(QpError::NotPositiveDefinite)?;
        let l_inv = chol
            .l()
            .solve_lower_triangular(&DMatrix::identity(n, n))
            .ok_or(QpError::NotPositiveDefinite)?;

        let mut x = -chol.solve(&self.linear);
        let row_norms: Vec<f64> = (0..m)
            .map(|i| self.rows.row(i).norm().max(f64::MIN_POSITIVE))
            .collect();
        let mut active: Vec<ActiveConstraint> = Vec::new();
        let mut lambda: Vec<f64> = Vec::new();
        let mut iterations = 0usize;

        let normal = |c: ActiveConstraint| -> DVector<f64> {
            let r = self.rows.row(c.row).transpose();
            match c.side {
                Side::Lower => r,
                Side::Upper => -r,
            }
        };
        // slack of the constraint in ≥ 0 form
        let slack = |c: ActiveConstraint, x: &DVector<f64>| -> f64 {
            let v = self.rows.row(c.row).dot(&x.transpose());
            match c.side {
                Side::Lower => v - self.lower[c.row],
                Side::Upper => self.upper[c.row] - v,
            }
        };

        loop {
            // most violated constraint, scaled by its row norm
            let ax = &self.rows * &x;
            let mut pick: Option<(ActiveConstraint, f64)> = None;
            for i in 0..m {
                let lo = self.lower[i] - ax[i];
                let hi = ax[i] - self.upper[i];
                let (side, viol) = if lo >= hi {
                    (Side::Lower, lo)
                } else {
                    (Side::Upper, hi)
                };
                if viol <= opts.tol {
                    continue;
                }
                let c = ActiveConstraint { row: i, side };
                if active.contains(&c) {
                    continue;
                }
                let scaled = viol / row_norms[i];
                if pick.is_none_or(|(_, best)| scaled > best) {
                    pick = Some((c, scaled));
                }
            }
            let Some((p, _)) = pick else {
                break;
            };
            let np = normal(p);
            let mut lambda_p = 0.0;

            loop {
                if iterations >= opts.max_iter {
                    let best = self.finish(x, active, lambda, iterations, start);
                    return Err(QpError::MaxIterations {
                        best: Box::new(best),
                    });
                }
                iterations += 1;
                let q = active.len();
                let mut basis = DMatrix::zeros(n, q);
                for (k, c) in active.iter().enumerate() {
                    basis.set_column(k, &(&l_inv * normal(*c)));
                }
                let (qmat, rmat) = householder_qr(&basis);
                // d = Jᵀ n_p with J = L⁻ᵀ Q
                let d = qmat.transpose() * (&l_inv * &np);
                let d_norm2 = d.norm_squared();
                let d2 = d.rows(q, n - q);
                // primal step direction z = J₂ d₂
                let z = l_inv.transpose() * (qmat.columns(q, n - q) * d2);
                // dual step direction r = R⁻¹ d₁
                let r = if q > 0 {
                    rmat.solve_upper_triangular(&d.rows(0, q).into_owned())
                        .unwrap_or_else(|| DVector::zeros(q))
                } else {
                    DVector::zeros(0)
                };

                let mut t1 = f64::INFINITY;
                let mut drop = None;
                for k in 0..q {
                    if r[k] > 1e-14 {
                        let t = lambda[k] / r[k];
                        if t < t1 {
                            t1 = t;
                            drop = Some(k);
                        }
                    }
                }
                let zn = d2.norm_squared();
                let t2 = if zn > 1e-13 * d_norm2 {
                    -slack(p, &x) / zn
                } else {
                    f64::INFINITY
                };
                if t1.is_infinite() && t2.is_infinite() {
                    return Err(QpError::Infeasible { row: p.row });
                }
                if t2.is_infinite() {
                    let k = drop.expect("finite partial step has a blocking constraint");
                    for (lam, rk) in lambda.iter_mut().zip(r.iter()) {
                        *lam -= t1 * rk;
                    }
                    lambda_p += t1;
                    active.remove(k);
                    lambda.remove(k);
                    continue;
                }
                let t = t1.min(t2);
                x += &z * t;
                for (lam, rk) in lambda.iter_mut().zip(r.iter()) {
                    *lam -= t * rk;
                }
                lambda_p += t;
                if t2 <= t1 {
                    active.push(p);
                    lambda.push(lambda_p);
                    break;
                }
                let k = drop.expect("partial step has a blocking constraint");
                active.remove(k);
                lambda.remove(k);
            }
        }
        Ok(self.finish(x, active, lambda, iterations, start))
    }

    fn finish(
        &self,
        x: DVector<f64>,
        active: Vec<ActiveConstraint>,
        lambda: Vec<f64>,
        iterations: usize,
        start: Instant,
    ) -> QpSolution {
        let mut residual = &self.hessian * &x + &self.linear;
        for (c, lam) in active.iter().zip(&lambda) {
            let row = self.rows.row(c.row).transpose();
            match c.side {
                Side::Lower => residual -= row * *lam,
                Side::Upper => residual += row * *lam,
            }
        }
        QpSolution {
            objective: self.objective(&x),
            max_violation: self.max_violation(&x),
            stationarity: residual.amax(),
            x,
            active,
            multipliers: lambda,
            iterations,
            seconds: start.elapsed().as_secs_f64(),
        }
    }
}

/// Full Householder QR of an `n × q` matrix with `q ≤ n`: returns the
/// orthogonal `n × n` factor and the `q × q` upper-triangular block.
fn householder_qr(a: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let (n, q) = a.shape();
    let mut r = a.clone();
    let mut qm = DMatrix::<f64>::identity(n, n);
    for k in 0..q.min(n) {
        let col = r.view((k, k), (n - k, 1)).into_owned();
        let alpha = col.norm();
        if alpha == 0.0 {
            continue;
        }
        let sign = if col[0] >= 0.0 { 1.0 } else { -1.0 };
        let mut v = col.clone_owned();
        v[0] += sign * alpha;
        let vnorm2 = v.norm_squared();
        if vnorm2 == 0.0 {
            continue;
        }
        // R ← (I − 2vvᵀ/vᵀv) R on the trailing block
        for j in k..q {
            let s = 2.0 * (0..n - k).map(|i| v[i] * r[(k + i, j)]).sum::<f64>() / vnorm2;
            for i in 0..n - k {
                r[(k + i, j)] -= s * v[i];
            }
        }
        // Q ← Q (I − 2vvᵀ/vᵀv)
        for i in 0..n {
            let s = 2.0 * (0..n - k).map(|l| qm[(i, k + l)] * v[l]).sum::<f64>() / vnorm2;
            for l in 0..n - k {
                qm[(i, k + l)] -= s * v[l];
            }
        }
    }
    let rq = r.view((0, 0), (q, q)).into_owned();
    (qm, upper_triangle(rq))
}

fn upper_triangle(mut r: DMatrix<f64>) -> DMatrix<f64> {
    let q = r.nrows();
    for i in 0..q {
        for j in 0..i {
            r[(i, j)] = 0.0;
        }
    }
    r
}

#[cfg(test)]
mod tests {
    use super::*;

    fn qp(h: &[f64], g: &[f64], rows: &[&[f64]], lo: &[f64], hi: &[f64]) -> DenseQp {
        let n = g.len();
        let m = rows.len();
        DenseQp {
            hessian: DMatrix::from_row_slice(n, n, h),
            linear: DVector::from_column_slice(g),
            rows: DMatrix::from_fn(m, n, |i, j| rows[i][j]),
            lower: DVector::from_column_slice(lo),
            upper: DVector::from_column_slice(hi),
        }
    }

    #[test]
    fn unconstrained_minimum() {
        let p = qp(&[2.0, 0.0, 0.0, 4.0], &[-2.0, -4.0], &[], &[], &[]);
        let s = p.solve(&QpOptions::default()).unwrap();
        assert!((s.x[0] - 1.0).abs() < 1e-14 && (s.x[1] - 1.0).abs() < 1e-14);
        assert_eq!(s.iterations, 0);
    }

    #[test]
    fn single_inequality() {
        // min ½(x²+y²) + x  s.t. x + 2y ≥ 1  →  (-0.6, 0.8)
        let inf = f64::INFINITY;
        let p = qp(
            &[1.0, 0.0, 0.0, 1.0],
            &[1.0, 0.0],
            &[&[1.0, 2.0]],
            &[1.0],
            &[inf],
        );
        let s = p.solve(&QpOptions::default()).unwrap();
        assert!((s.x[0] + 0.6).abs() < 1e-12 && (s.x[1] - 0.8).abs() < 1e-12);
        assert_eq!(s.active.len(), 1);
        assert!((s.multipliers[0] - 0.4).abs() < 1e-12);
        assert!(s.stationarity < 1e-12);
    }

    #[test]
    fn upper_bounds_and_degenerate_duplicates() {
        // min (x-3)² + (y-3)²  s.t. x ≤ 1 (twice), x + y ≤ 2
        let inf = f64::INFINITY;
        let p = qp(
            &[2.0, 0.0, 0.0, 2.0],
            &[-6.0, -6.0],
            &[&[1.0, 0.0], &[1.0, 0.0], &[1.0, 1.0]],
            &[-inf, -inf, -inf],
            &[1.0, 1.0, 2.0],
        );
        let s = p.solve(&QpOptions::default()).unwrap();
        assert!((s.x[0] - 1.0).abs() < 1e-12 && (s.x[1] - 1.0).abs() < 1e-12);
        assert!(s.max_violation < 1e-12);
        assert!(s.multipliers.iter().all(|l| *l >= -1e-12));
    }

    #[test]
    fn infeasible_box() {
        let p = qp(&[1.0], &[0.0], &[&[1.0], &[1.0]], &[2.0, -1.0], &[3.0, 1.0]);
        assert!(matches!(
            p.solve(&QpOptions::default()),
            Err(QpError::Infeasible { .. })
        ));
    }

    #[test]
    fn not_positive_definite() {
        let p = qp(&[0.0], &[1.0], &[], &[], &[]);
        assert_eq!(
            p.solve(&QpOptions::default()),
            Err(QpError::NotPositiveDefinite)
        );
    }

    #[test]
    fn max_iterations_reports_iterate() {
        let inf = f64::INFINITY;
        let p = qp(
            &[1.0, 0.0, 0.0, 1.0],
            &[1.0, 0.0],
            &[&[1.0, 2.0]],
            &[1.0],
            &[inf],
        );
        let opts = QpOptions {
            tol: 1e-9,
            max_iter: 0,
        };
        assert!(matches!(p.solve(&opts), Err(QpError::MaxIterations { .. })));
    }

    #[test]
    fn householder_reconstructs() {
        let a = DMatrix::from_row_slice(4, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 9.0]);
        let (q, r) = householder_qr(&a);
        assert!((q.transpose() * &q - DMatrix::identity(4, 4)).amax() < 1e-14);
        let qr = q.columns(0, 2) * r;
        assert!((qr - a).amax() < 1e-13);
    }
}
