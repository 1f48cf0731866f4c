//! Constrained least-squares fit of the collision-free space.
//!
//! The free space around the agent is modelled as a star-convex region whose
//! boundary is a real spherical-harmonic radius field. The weights `x` solve
//!
//! ```text
//! minimize    ‖A x − b‖²
//! subject to  0 ≤ C x ≤ d        measured (eroded) radii
//!             0 ≤ A x ≤ b        soft sphere directions
//!             h_lb ≤ x ≤ h_ub    weight caps
//! ```
//!
//! where the rows of `A` sample the basis on a near-uniform direction set and
//! `b` is the free-space radius `r` repeated; the rows of `C` sample the basis
//! at the measured directions and `d` holds their radii.

use std::time::Instant;

use nalgebra::{DMatrix, DVector, Vector3};
use thiserror::Error;

use crate::error::DomainError;
use crate::geometry::{cart_to_sph, fibonacci_directions, Direction, PointCloud};
use crate::qp::{DenseQp, QpError, QpOptions};
use crate::sh_basis::{coefficient_count, design_matrix, RealShExpansion};

/// Below this distance from the expansion centre the direction of a point is
/// undefined and clearance falls back to a fixed direction.
pub const EPS_CENTER: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FreeSpaceError {
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error("no soft directions")]
    NoSoftDirections,
    #[error("{soft} soft directions cannot determine {coefficients} coefficients")]
    Underdetermined { soft: usize, coefficients: usize },
    #[error("free-space radius must be positive, got {0}")]
    Radius(f64),
    #[error("no weights satisfy the constraints (degenerate sensing)")]
    Infeasible,
    #[error("estimator did not converge in {} iterations", .diagnostics.iterations)]
    MaxIterations {
        weights: Vec<f64>,
        diagnostics: SolveDiagnostics,
    },
    #[error("least-squares system is rank deficient")]
    RankDeficient,
}

/// Matrices of the constrained least-squares problem.
#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    pub max_order: usize,
    /// Soft design matrix `A`, one row per soft direction.
    pub a: DMatrix<f64>,
    /// `b = r·1`.
    pub b: DVector<f64>,
    /// Hard design matrix `C`, one row per measured point.
    pub c: DMatrix<f64>,
    /// Measured radii.
    pub d: DVector<f64>,
    pub h_lb: DVector<f64>,
    pub h_ub: DVector<f64>,
}

impl QpProblem {
    pub fn coefficients(&self) -> usize {
        self.a.ncols()
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        (&self.a * x - &self.b).norm_squared()
    }

    /// Largest violation of any constraint at `x`.
    pub fn max_violation(&self, x: &DVector<f64>) -> f64 {
        let two_sided = |vals: DVector<f64>, hi: &DVector<f64>| {
            vals.iter()
                .zip(hi.iter())
                .map(|(v, h)| (-v).max(v - h))
                .fold(0.0, f64::max)
        };
        let bounds = x
            .iter()
            .zip(self.h_lb.iter().zip(self.h_ub.iter()))
            .map(|(v, (lo, hi))| (lo - v).max(v - hi))
            .fold(0.0, f64::max);
        two_sided(&self.c * x, &self.d)
            .max(two_sided(&self.a * x, &self.b))
            .max(bounds)
            .max(0.0)
    }

    /// The problem in the generic row-constrained form; rows are ordered soft
    /// directions, then measured points, then weight bounds.
    pub fn to_dense(&self) -> DenseQp {
        let k = self.coefficients();
        let n_soft = self.a.nrows();
        let n_hard = self.c.nrows();
        let m = n_soft + n_hard + k;
        let mut rows = DMatrix::zeros(m, k);
        rows.view_mut((0, 0), (n_soft, k)).copy_from(&self.a);
        rows.view_mut((n_soft, 0), (n_hard, k)).copy_from(&self.c);
        rows.view_mut((n_soft + n_hard, 0), (k, k))
            .fill_with_identity();
        let mut lower = DVector::zeros(m);
        let mut upper = DVector::zeros(m);
        upper.rows_mut(0, n_soft).copy_from(&self.b);
        upper.rows_mut(n_soft, n_hard).copy_from(&self.d);
        lower.rows_mut(n_soft + n_hard, k).copy_from(&self.h_lb);
        upper.rows_mut(n_soft + n_hard, k).copy_from(&self.h_ub);
        let at = self.a.transpose();
        DenseQp {
            hessian: &at * &self.a * 2.0,
            linear: at * &self.b * -2.0,
            rows,
            lower,
            upper,
        }
    }
}

/// Solver report for one fit.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SolveDiagnostics {
    /// `‖A x − b‖²` at the returned weights.
    pub objective: f64,
    pub max_violation: f64,
    /// Stationarity residual relative to `max(1, ‖∇ at x = 0‖∞)`.
    pub kkt_residual: f64,
    pub iterations: usize,
    pub active_constraints: usize,
    pub seconds: f64,
}

/// Assembles the estimator matrices.
///
/// `measured` must already be preprocessed (clamped and eroded), with points
/// relative to the expansion centre.
pub fn build_qp(
    measured: &PointCloud,
    soft_dirs: &[Direction],
    r: f64,
    max_order: usize,
    weight_cap_factor: f64,
) -> Result<QpProblem, FreeSpaceError> {
    if soft_dirs.is_empty() {
        return Err(FreeSpaceError::NoSoftDirections);
    }
    if !(r > 0.0 && r.is_finite()) {
        return Err(FreeSpaceError::Radius(r));
    }
    let k = coefficient_count(max_order);
    if soft_dirs.len() < k {
        return Err(FreeSpaceError::Underdetermined {
            soft: soft_dirs.len(),
            coefficients: k,
        });
    }
    let a = design_matrix(soft_dirs, max_order)?.values;
    let b = DVector::from_element(soft_dirs.len(), r);

    let mut dirs = Vec::with_capacity(measured.len());
    let mut radii = Vec::with_capacity(measured.len());
    for p in &measured.points {
        let s = cart_to_sph(p);
        dirs.push(s.direction());
        radii.push(s.r);
    }
    let c = if dirs.is_empty() {
        DMatrix::zeros(0, k)
    } else {
        design_matrix(&dirs, max_order)?.values
    };
    let cap = weight_cap_factor * r;
    Ok(QpProblem {
        max_order,
        a,
        b,
        c,
        d: DVector::from_vec(radii),
        h_lb: DVector::from_element(k, -cap),
        h_ub: DVector::from_element(k, cap),
    })
}

/// Solves the estimator problem. Deterministic for identical inputs.
pub fn solve_qp(
    qp: &QpProblem,
    tol: f64,
    max_iter: usize,
) -> Result<(Vec<f64>, SolveDiagnostics), FreeSpaceError> {
    let start = Instant::now();
    let dense = qp.to_dense();
    let scale = dense.linear.amax().max(1.0);
    let result = dense.solve(&QpOptions { tol, max_iter });
    let diag = |s: &crate::qp::QpSolution| SolveDiagnostics {
        objective: qp.objective(&s.x),
        max_violation: qp.max_violation(&s.x),
        kkt_residual: s.stationarity / scale,
        iterations: s.iterations,
        active_constraints: s.active.len(),
        seconds: start.elapsed().as_secs_f64(),
    };
    match result {
        Ok(s) => Ok((s.x.as_slice().to_vec(), diag(&s))),
        Err(QpError::MaxIterations { best }) => Err(FreeSpaceError::MaxIterations {
            weights: best.x.as_slice().to_vec(),
            diagnostics: diag(&best),
        }),
        Err(QpError::Infeasible { .. }) => Err(FreeSpaceError::Infeasible),
        Err(QpError::NotPositiveDefinite) | Err(QpError::Dimension(_)) => {
            Err(FreeSpaceError::RankDeficient)
        }
    }
}

/// Knobs of the estimator.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimationParams {
    pub max_order: usize,
    /// Number of Fibonacci directions in the soft set.
    pub soft_directions: usize,
    /// Free-space radius `r` (the `b` entries).
    pub free_radius: f64,
    /// Region-of-interest radius the cloud was clamped to.
    pub roi_radius: f64,
    pub weight_cap_factor: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl EstimationParams {
    pub fn new(
        max_order: usize,
        soft_directions: usize,
        free_radius: f64,
        roi_radius: f64,
    ) -> Self {
        Self {
            max_order,
            soft_directions,
            free_radius,
            roi_radius,
            weight_cap_factor: 4.0,
            tol: 1e-6,
            max_iter: 500,
        }
    }
}

/// A fitted free-space field.
#[derive(Debug, Clone, PartialEq)]
pub struct FreeSpaceEstimate {
    pub expansion: RealShExpansion,
    pub roi_radius: f64,
    pub diagnostics: SolveDiagnostics,
}

/// Fits the free space around `measured.frame_origin`.
pub fn estimate_freespace(
    measured: &PointCloud,
    params: &EstimationParams,
) -> Result<FreeSpaceEstimate, FreeSpaceError> {
    let soft = fibonacci_directions(params.soft_directions.max(1));
    estimate_with_directions(measured, &soft, params)
}

/// As [`estimate_freespace`] with a caller-provided soft direction set.
pub fn estimate_with_directions(
    measured: &PointCloud,
    soft: &[Direction],
    params: &EstimationParams,
) -> Result<FreeSpaceEstimate, FreeSpaceError> {
    let qp = build_qp(
        measured,
        soft,
        params.free_radius,
        params.max_order,
        params.weight_cap_factor,
    )?;
    let (weights, diagnostics) = solve_qp(&qp, params.tol, params.max_iter)?;
    Ok(FreeSpaceEstimate {
        expansion: RealShExpansion::new(params.max_order, weights, measured.frame_origin)?,
        roi_radius: params.roi_radius,
        diagnostics,
    })
}

impl FreeSpaceEstimate {
    pub fn center(&self) -> Vector3<f64> {
        self.expansion.center()
    }

    /// Field radius along `dir`.
    pub fn radius(&self, dir: Direction) -> f64 {
        self.expansion.radius(dir)
    }

    /// Clearance of `p` together with its gradient with respect to `p`.
    ///
    /// Within [`EPS_CENTER`] of the centre the gradient is zero.
    pub fn clearance_with_gradient(&self, p: &Vector3<f64>) -> (f64, Vector3<f64>) {
        let q = p - self.center();
        let s = cart_to_sph(&q);
        if s.r < EPS_CENTER {
            return (
                self.radius(Direction {
                    theta: 0.0,
                    phi: 0.0,
                }) - s.r,
                Vector3::zeros(),
            );
        }
        let (r, grad_r) = self.expansion.radius_with_gradient(s.direction(), s.r);
        (r - s.r, grad_r - q / s.r)
    }
}

/// Field radius in the direction of `p` minus the distance of `p` from the
/// centre; non-negative inside the estimated free space.
pub fn signed_clearance(est: &FreeSpaceEstimate, p: &Vector3<f64>) -> f64 {
    let q = p - est.center();
    let s = cart_to_sph(&q);
    if s.r < EPS_CENTER {
        return est.radius(Direction {
            theta: 0.0,
            phi: 0.0,
        }) - s.r;
    }
    est.radius(s.direction()) - s.r
}
