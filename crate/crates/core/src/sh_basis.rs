//! Real spherical-harmonic basis.
//!
//! Coefficients are stored flat with `j = l² + l + m`, so an expansion of
//! maximum order `L` has `(L + 1)²` weights. The real basis is the usual
//! orthonormal one built from the Condon–Shortley associated Legendre
//! functions:
//!
//! ```text
//! Y_l^m  = N(l,0) P_l^0(cos θ)                         m = 0
//! Y_l^m  = √2 N(l,m) P_l^m(cos θ) cos(m φ)             m > 0
//! Y_l^m  = √2 N(l,|m|) P_l^|m|(cos θ) sin(|m| φ)       m < 0
//! N(l,m) = √((2l+1)(l-m)! / (4π (l+m)!))
//! ```
//!
//! Everything is evaluated by three-term recurrences with the normalization
//! folded in, so no factorials are formed.

use std::f64::consts::{PI, SQRT_2};

use nalgebra::{DMatrix, DVector, Vector3};

use crate::error::DomainError;
use crate::geometry::{check_angles, Direction};

/// `Y_0^0`, the constant basis function.
pub const Y00: f64 = 0.282_094_791_773_878_14;

/// Order/degree pair `(l, m)` with `|m| ≤ l`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct HarmonicIndex {
    l: usize,
    m: i64,
}

impl HarmonicIndex {
    pub fn new(l: usize, m: i64) -> Result<Self, DomainError> {
        if m.unsigned_abs() as usize > l {
            return Err(DomainError::Index { l, m });
        }
        Ok(Self { l, m })
    }

    /// Inverse of [`HarmonicIndex::flat`].
    pub fn from_flat(j: usize) -> Self {
        let l = j.isqrt();
        let m = j as i64 - (l * l + l) as i64;
        Self { l, m }
    }

    pub fn l(&self) -> usize {
        self.l
    }

    pub fn m(&self) -> i64 {
        self.m
    }

    pub fn flat(&self) -> usize {
        (self.l * self.l + self.l).wrapping_add_signed(self.m as isize)
    }
}

/// Flat coefficient index `l² + l + m`.
pub fn flat_index(l: usize, m: i64) -> Result<usize, DomainError> {
    HarmonicIndex::new(l, m).map(|h| h.flat())
}

/// Number of coefficients of an expansion with maximum order `max_order`.
pub fn coefficient_count(max_order: usize) -> usize {
    (max_order + 1) * (max_order + 1)
}

/// Associated Legendre function `P_l^m(x)` with the Condon–Shortley phase,
/// unnormalized.
pub fn assoc_legendre(l: usize, m: usize, x: f64) -> Result<f64, DomainError> {
    if m > l {
        return Err(DomainError::Index { l, m: m as i64 });
    }
    if !(-1.0..=1.0).contains(&x) {
        return Err(DomainError::Argument(x));
    }
    let mut pmm = 1.0;
    if m > 0 {
        let s = ((1.0 - x) * (1.0 + x)).sqrt();
        let mut odd = 1.0;
        for _ in 0..m {
            pmm *= -odd * s;
            odd += 2.0;
        }
    }
    if l == m {
        return Ok(pmm);
    }
    let mut prev = pmm;
    let mut cur = x * (2 * m + 1) as f64 * pmm;
    for ll in m + 2..=l {
        let next = (x * (2 * ll - 1) as f64 * cur - (ll + m - 1) as f64 * prev) / (ll - m) as f64;
        prev = cur;
        cur = next;
    }
    Ok(cur)
}

#[inline]
fn tri(l: usize, m: usize) -> usize {
    l * (l + 1) / 2 + m
}

/// Fills `out[tri(l, m)]` with `N(l,m) P_l^m(cos θ)` for `0 ≤ m ≤ l ≤ max_order`.
fn normalized_legendre(max_order: usize, cos_t: f64, sin_t: f64, out: &mut [f64]) {
    out[0] = Y00;
    for m in 1..=max_order {
        let mf = m as f64;
        out[tri(m, m)] = -((2.0 * mf + 1.0) / (2.0 * mf)).sqrt() * sin_t * out[tri(m - 1, m - 1)];
    }
    for m in 0..max_order {
        out[tri(m + 1, m)] = (2.0 * m as f64 + 3.0).sqrt() * cos_t * out[tri(m, m)];
    }
    for m in 0..=max_order {
        let m2 = (m * m) as f64;
        for l in m + 2..=max_order {
            let lf = l as f64;
            let a = ((4.0 * lf * lf - 1.0) / (lf * lf - m2)).sqrt();
            let b = (((lf - 1.0) * (lf - 1.0) - m2) / (4.0 * (lf - 1.0) * (lf - 1.0) - 1.0)).sqrt();
            out[tri(l, m)] = a * (cos_t * out[tri(l - 1, m)] - b * out[tri(l - 2, m)]);
        }
    }
}

/// θ-derivative of the table produced by [`normalized_legendre`].
fn normalized_legendre_dtheta(max_order: usize, p: &[f64], out: &mut [f64]) {
    let at = |l: usize, m: usize| if m > l { 0.0 } else { p[tri(l, m)] };
    for l in 0..=max_order {
        let lf = l as f64;
        out[tri(l, 0)] = (lf * (lf + 1.0)).sqrt() * at(l, 1);
        for m in 1..=l {
            let mf = m as f64;
            out[tri(l, m)] = 0.5
                * (((lf + mf + 1.0) * (lf - mf)).sqrt() * at(l, m + 1)
                    - ((lf + mf) * (lf - mf + 1.0)).sqrt() * at(l, m - 1));
        }
    }
}

fn legendre_len(max_order: usize) -> usize {
    tri(max_order, max_order) + 1
}

/// Every basis value at one direction, written in flat-index order.
///
/// `out` must hold [`coefficient_count`]`(max_order)` entries.
pub fn basis_row(max_order: usize, dir: Direction, out: &mut [f64]) {
    assert_eq!(out.len(), coefficient_count(max_order));
    let (sin_t, cos_t) = dir.theta.sin_cos();
    let mut p = vec![0.0; legendre_len(max_order)];
    normalized_legendre(max_order, cos_t, sin_t, &mut p);
    for l in 0..=max_order {
        let centre = l * l + l;
        out[centre] = p[tri(l, 0)];
        for m in 1..=l {
            let (s, c) = (m as f64 * dir.phi).sin_cos();
            let scaled = SQRT_2 * p[tri(l, m)];
            out[centre + m] = scaled * c;
            out[centre - m] = scaled * s;
        }
    }
}

/// Partial derivatives of every basis function with respect to θ and φ.
pub fn basis_row_derivatives(
    max_order: usize,
    dir: Direction,
    d_theta: &mut [f64],
    d_phi: &mut [f64],
) {
    let k = coefficient_count(max_order);
    assert!(d_theta.len() == k && d_phi.len() == k);
    let (sin_t, cos_t) = dir.theta.sin_cos();
    let mut p = vec![0.0; legendre_len(max_order)];
    let mut dp = vec![0.0; legendre_len(max_order)];
    normalized_legendre(max_order, cos_t, sin_t, &mut p);
    normalized_legendre_dtheta(max_order, &p, &mut dp);
    for l in 0..=max_order {
        let centre = l * l + l;
        d_theta[centre] = dp[tri(l, 0)];
        d_phi[centre] = 0.0;
        for m in 1..=l {
            let mf = m as f64;
            let (s, c) = (mf * dir.phi).sin_cos();
            d_theta[centre + m] = SQRT_2 * dp[tri(l, m)] * c;
            d_theta[centre - m] = SQRT_2 * dp[tri(l, m)] * s;
            d_phi[centre + m] = -SQRT_2 * mf * p[tri(l, m)] * s;
            d_phi[centre - m] = SQRT_2 * mf * p[tri(l, m)] * c;
        }
    }
}

/// Real orthonormal spherical harmonic `Y_l^m(θ, φ)`.
pub fn real_sh(l: usize, m: i64, theta: f64, phi: f64) -> Result<f64, DomainError> {
    let idx = HarmonicIndex::new(l, m)?;
    check_angles(theta, phi)?;
    let mut p = vec![0.0; legendre_len(l)];
    normalized_legendre(l, theta.cos(), theta.sin(), &mut p);
    let k = m.unsigned_abs() as usize;
    let base = p[tri(idx.l, k)];
    Ok(match m {
        0 => base,
        m if m > 0 => SQRT_2 * base * (k as f64 * phi).cos(),
        _ => SQRT_2 * base * (k as f64 * phi).sin(),
    })
}

/// Basis evaluations at a set of directions; rows are directions, columns are
/// flat harmonic indices.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    pub max_order: usize,
    pub directions: Vec<Direction>,
    pub values: DMatrix<f64>,
}

impl DesignMatrix {
    pub fn rows(&self) -> usize {
        self.values.nrows()
    }
}

pub fn design_matrix(
    directions: &[Direction],
    max_order: usize,
) -> Result<DesignMatrix, DomainError> {
    if directions.is_empty() {
        return Err(DomainError::NoDirections);
    }
    let k = coefficient_count(max_order);
    let mut values = DMatrix::zeros(directions.len(), k);
    let mut row = vec![0.0; k];
    for (i, d) in directions.iter().enumerate() {
        check_angles(d.theta, d.phi)?;
        basis_row(max_order, *d, &mut row);
        for (j, v) in row.iter().enumerate() {
            values[(i, j)] = *v;
        }
    }
    Ok(DesignMatrix {
        max_order,
        directions: directions.to_vec(),
        values,
    })
}

/// A truncated real spherical-harmonic radius field `r(θ, φ)` centred at a
/// world point.
#[derive(Debug, Clone, PartialEq)]
pub struct RealShExpansion {
    max_order: usize,
    weights: Vec<f64>,
    center: Vector3<f64>,
}

impl RealShExpansion {
    pub fn new(
        max_order: usize,
        weights: Vec<f64>,
        center: Vector3<f64>,
    ) -> Result<Self, DomainError> {
        let expected = coefficient_count(max_order);
        if weights.len() != expected {
            return Err(DomainError::WeightCount {
                expected,
                got: weights.len(),
            });
        }
        if let Some(index) = weights.iter().position(|w| !w.is_finite()) {
            return Err(DomainError::NonFiniteWeight { index });
        }
        Ok(Self {
            max_order,
            weights,
            center,
        })
    }

    /// The sphere of the given radius: only the constant weight is non-zero.
    pub fn sphere(radius: f64, max_order: usize, center: Vector3<f64>) -> Self {
        let mut weights = vec![0.0; coefficient_count(max_order)];
        weights[0] = radius / Y00;
        Self {
            max_order,
            weights,
            center,
        }
    }

    pub fn max_order(&self) -> usize {
        self.max_order
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn center(&self) -> Vector3<f64> {
        self.center
    }

    /// `r(θ, φ)`; may be negative for arbitrary weights.
    pub fn eval_radius(&self, theta: f64, phi: f64) -> Result<f64, DomainError> {
        let dir = Direction::new(theta, phi)?;
        Ok(self.radius(dir))
    }

    pub(crate) fn radius(&self, dir: Direction) -> f64 {
        let mut row = vec![0.0; self.weights.len()];
        basis_row(self.max_order, dir, &mut row);
        dot(&row, &self.weights)
    }

    /// Radius together with its gradient with respect to the Cartesian
    /// position of a point at direction `dir` and distance `dist > 0`.
    pub(crate) fn radius_with_gradient(&self, dir: Direction, dist: f64) -> (f64, Vector3<f64>) {
        let k = self.weights.len();
        let mut row = vec![0.0; k];
        let mut dt = vec![0.0; k];
        let mut dp = vec![0.0; k];
        basis_row(self.max_order, dir, &mut row);
        basis_row_derivatives(self.max_order, dir, &mut dt, &mut dp);
        let r = dot(&row, &self.weights);
        let dr_dtheta = dot(&dt, &self.weights);
        let dr_dphi = dot(&dp, &self.weights);
        let (st, ct) = dir.theta.sin_cos();
        let (sp, cp) = dir.phi.sin_cos();
        let e_theta = Vector3::new(ct * cp, ct * sp, -st);
        let e_phi = Vector3::new(-sp, cp, 0.0);
        let mut grad = e_theta * dr_dtheta;
        // the φ term is bounded at the poles but 0/0 there numerically
        if st > 1e-12 {
            grad += e_phi * (dr_dphi / st);
        }
        (r, grad / dist)
    }

    /// Weights as a column vector.
    pub fn weight_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.weights)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Gauss–Legendre nodes and weights on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> Vec<(f64, f64)> {
    assert!(n >= 1);
    let mut nodes = Vec::with_capacity(n);
    for i in 0..n {
        // Tricomi initial guess, then Newton on P_n
        let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let kf = k as f64;
                let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes.push((x, w));
    }
    nodes
}

/// Product quadrature on the sphere: Gauss–Legendre in `cos θ`, uniform in
/// `φ`. Exact for band-limited integrands of degree below
/// `min(2 n_theta, n_phi)`.
pub fn sphere_quadrature(n_theta: usize, n_phi: usize) -> Vec<(Direction, f64)> {
    let mut out = Vec::with_capacity(n_theta * n_phi);
    let dphi = 2.0 * PI / n_phi as f64;
    for (x, w) in gauss_legendre(n_theta) {
        let theta = x.clamp(-1.0, 1.0).acos();
        for k in 0..n_phi {
            out.push((
                Direction {
                    theta,
                    phi: k as f64 * dphi,
                },
                w * dphi,
            ));
        }
    }
    out
}
