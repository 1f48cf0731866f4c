//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector, SMatrix, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use shplan::freespace::{FreeSpaceEstimate, QpProblem, SolveDiagnostics};
use shplan::planner::{heading_rotation, AgentState};
use shplan::sh_basis::{coefficient_count, RealShExpansion};
use shplan::sim::{BoxObstacle, Scenario};

/// Associated Legendre value from the Rodrigues formula
/// `P_l^m(x) = (-1)^m (1-x²)^{m/2} / (2^l l!) · d^{l+m}/dx^{l+m} (x²-1)^l`,
/// with the polynomial expanded and differentiated coefficient by coefficient.
pub fn rodrigues_legendre(l: usize, m: usize, x: f64) -> f64 {
    // (x² - 1)^l = Σ_k C(l,k) (-1)^{l-k} x^{2k}
    let mut coeffs = vec![0.0f64; 2 * l + 1];
    for k in 0..=l {
        let sign = if (l - k) % 2 == 0 { 1.0 } else { -1.0 };
        coeffs[2 * k] = sign * binomial(l, k);
    }
    for _ in 0..(l + m) {
        coeffs = coeffs
            .iter()
            .enumerate()
            .skip(1)
            .map(|(p, c)| c * p as f64)
            .collect();
    }
    let poly = coeffs.iter().rev().fold(0.0, |acc, c| acc * x + c);
    let denom = 2f64.powi(l as i32) * factorial(l);
    let phase = if m % 2 == 0 { 1.0 } else { -1.0 };
    phase * (1.0 - x * x).powf(m as f64 / 2.0) * poly / denom
}

pub fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

pub fn binomial(n: usize, k: usize) -> f64 {
    factorial(n) / (factorial(k) * factorial(n - k))
}

/// One face of a two-sided row: `row · x = bound`.
struct Face {
    row: DVector<f64>,
    bound: f64,
}

/// Global optimum of the estimator problem by enumerating every set of at
/// most `K` active faces, solving the equality-constrained least-squares
/// problem for each, and keeping the best feasible candidate. Exact for a
/// strictly convex objective; exponential, so only for tiny problems.
pub fn brute_force_qp(qp: &QpProblem, feas_tol: f64) -> Option<(f64, DVector<f64>)> {
    let k = qp.coefficients();
    let mut faces = Vec::new();
    let mut push_two_sided = |rows: &DMatrix<f64>, lo: &DVector<f64>, hi: &DVector<f64>| {
        for i in 0..rows.nrows() {
            let row = rows.row(i).transpose();
            faces.push(Face {
                row: row.clone(),
                bound: lo[i],
            });
            faces.push(Face { row, bound: hi[i] });
        }
    };
    push_two_sided(&qp.a, &DVector::zeros(qp.a.nrows()), &qp.b);
    push_two_sided(&qp.c, &DVector::zeros(qp.c.nrows()), &qp.d);
    push_two_sided(&DMatrix::identity(k, k), &qp.h_lb, &qp.h_ub);

    let h = qp.a.transpose() * &qp.a * 2.0;
    let g = qp.a.transpose() * &qp.b * -2.0;
    let mut best: Option<(f64, DVector<f64>)> = None;
    let mut chosen = Vec::with_capacity(k);
    enumerate(&faces, 0, k, &mut chosen, &mut |set: &[usize]| {
        let n = k + set.len();
        let mut kkt = DMatrix::zeros(n, n);
        let mut rhs = DVector::zeros(n);
        kkt.view_mut((0, 0), (k, k)).copy_from(&h);
        rhs.rows_mut(0, k).copy_from(&(-&g));
        for (j, &f) in set.iter().enumerate() {
            for c in 0..k {
                kkt[(k + j, c)] = faces[f].row[c];
                kkt[(c, k + j)] = faces[f].row[c];
            }
            rhs[k + j] = faces[f].bound;
        }
        let Some(sol) = kkt.lu().solve(&rhs) else {
            return;
        };
        let x = sol.rows(0, k).into_owned();
        if !x.iter().all(|v| v.is_finite()) || qp.max_violation(&x) > feas_tol {
            return;
        }
        let obj = qp.objective(&x);
        if best.as_ref().is_none_or(|b| obj < b.0) {
            best = Some((obj, x));
        }
    });
    best
}

fn enumerate(
    faces: &[Face],
    from: usize,
    left: usize,
    chosen: &mut Vec<usize>,
    visit: &mut dyn FnMut(&[usize]),
) {
    visit(chosen);
    if left == 0 {
        return;
    }
    for f in from..faces.len() {
        chosen.push(f);
        enumerate(faces, f + 1, left - 1, chosen, visit);
        chosen.pop();
    }
}

pub fn random_state(rng: &mut ChaCha8Rng) -> AgentState {
    AgentState {
        p: Vector3::new(
            rng.random_range(-2.0..2.0),
            rng.random_range(-2.0..2.0),
            rng.random_range(-1.0..1.0),
        ),
        psi: rng.random_range(-3.0..3.0),
        v: Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        ),
        psi_dot: rng.random_range(-1.0..1.0),
    }
}

/// Exact discretization of the translational channel for a fixed heading:
/// x = [p; v], ẋ = A x + B u, via the exponential of the augmented matrix.
pub fn exact_translation(
    x: &AgentState,
    u: &Vector3<f64>,
    tau: f64,
    k: f64,
    dt: f64,
) -> (Vector3<f64>, Vector3<f64>) {
    let mut m = SMatrix::<f64, 9, 9>::zeros();
    let r = heading_rotation(x.psi);
    for i in 0..3 {
        for j in 0..3 {
            m[(i, 3 + j)] = r[(i, j)];
        }
        m[(3 + i, 3 + i)] = -1.0 / tau;
        m[(3 + i, 6 + i)] = k / tau;
    }
    let e = (m * dt).exp();
    let mut z = SMatrix::<f64, 9, 1>::zeros();
    z.fixed_rows_mut::<3>(0).copy_from(&x.p);
    z.fixed_rows_mut::<3>(3).copy_from(&x.v);
    z.fixed_rows_mut::<3>(6).copy_from(u);
    let out = e * z;
    (
        out.fixed_rows::<3>(0).into_owned(),
        out.fixed_rows::<3>(3).into_owned(),
    )
}

/// A positive field of radius about 3 with random higher-order ripple.
pub fn random_estimate(rng: &mut ChaCha8Rng, max_order: usize) -> FreeSpaceEstimate {
    let k = coefficient_count(max_order);
    let base = 3.0 * (4.0 * std::f64::consts::PI).sqrt();
    let weights: Vec<f64> = (0..k)
        .map(|j| {
            if j == 0 {
                base
            } else {
                rng.random_range(-0.4..0.4)
            }
        })
        .collect();
    FreeSpaceEstimate {
        expansion: RealShExpansion::new(max_order, weights, Vector3::new(0.1, -0.2, 0.05)).unwrap(),
        roi_radius: 4.0,
        diagnostics: SolveDiagnostics::default(),
    }
}

pub fn relative_error(analytic: &DVector<f64>, numeric: &DVector<f64>) -> f64 {
    (analytic - numeric).amax() / numeric.amax().max(1.0)
}

/// A seeded world with `boxes` random boxes between a start at (-6, 0, 0)
/// and a goal near (6, 0, 0), none within 1 m of either.
pub fn random_world(seed: u64, boxes: usize, max_steps: usize) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let start = Vector3::new(-6.0, 0.0, 0.0);
    let goal = Vector3::new(
        6.0,
        rng.random_range(-2.0..2.0),
        rng.random_range(-1.0..1.0),
    );
    let mut obstacles = vec![];
    while obstacles.len() < boxes {
        let c = Vector3::new(
            rng.random_range(-4.0..4.0),
            rng.random_range(-4.0..4.0),
            rng.random_range(-2.0..2.0),
        );
        let h = Vector3::new(
            rng.random_range(0.2..1.2),
            rng.random_range(0.2..1.2),
            rng.random_range(0.2..1.5),
        );
        let b = BoxObstacle::new(c, h).unwrap();
        if b.signed_distance(&start) > 1.0 && b.signed_distance(&goal) > 1.0 {
            obstacles.push(b);
        }
    }
    let mut s = Scenario::with_defaults(start, goal, obstacles);
    s.max_steps = max_steps;
    s.seed = seed;
    s
}
