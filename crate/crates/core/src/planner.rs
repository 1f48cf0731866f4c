//! Receding-horizon trajectory optimization inside a free-space estimate.
//!
//! The agent is a heading-controlled multirotor:
//!
//! ```text
//! ṗ = R(ψ) v
//! v̇ = (−v + k u_v) / τ
//! ψ̈ = (−ψ̇ + k_ψ u_ψ) / τ_ψ
//! ```
//!
//! with `R(ψ)` the rotation about world z. The planner minimizes
//! `Σ_{t=1..N} ‖p_t − x_g‖²_P + ‖u_{t−1}‖²_Q` over the inputs of the horizon
//! (single shooting), subject to every waypoint `p_1 … p_N` staying inside the
//! fitted field, box bounds on body velocity and heading rate, and box bounds
//! on the inputs.
//!
//! The nonlinear program is solved by sequential quadratic programming. Each
//! iteration linearizes the constraints around the current rollout and solves
//! a QP whose Hessian starts from the Gauss–Newton model of the cost and is
//! refined by damped BFGS updates of the Lagrangian. When the linearized
//! constraints are inconsistent the QP is made elastic. Steps are accepted on
//! an ℓ1 exact-penalty merit function with Armijo backtracking.

use std::time::Instant;

use nalgebra::{DMatrix, DVector, Dyn, Matrix3, Matrix4, OMatrix, SMatrix, SVector, Vector3, U8};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::freespace::{signed_clearance, FreeSpaceEstimate};
use crate::qp::{DenseQp, QpError, QpOptions};

type StateVec = SVector<f64, 8>;
type Sensitivity = OMatrix<f64, U8, Dyn>;

const PX: usize = 0;
const PSI: usize = 3;
const VX: usize = 4;
const PSI_DOT: usize = 7;

/// Wraps an angle into `(−π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    use std::f64::consts::{PI, TAU};
    let w = (a + PI).rem_euclid(TAU) - PI;
    if w <= -PI {
        w + TAU
    } else {
        w
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgentState {
    /// World position (m).
    pub p: Vector3<f64>,
    /// Heading (rad), in `(−π, π]`.
    pub psi: f64,
    /// Body-frame velocity (m/s).
    pub v: Vector3<f64>,
    /// Heading rate (rad/s).
    pub psi_dot: f64,
}

impl AgentState {
    pub fn at_rest(p: Vector3<f64>) -> Self {
        Self {
            p,
            psi: 0.0,
            v: Vector3::zeros(),
            psi_dot: 0.0,
        }
    }

    fn to_vec(self) -> StateVec {
        StateVec::from_column_slice(&[
            self.p.x,
            self.p.y,
            self.p.z,
            self.psi,
            self.v.x,
            self.v.y,
            self.v.z,
            self.psi_dot,
        ])
    }

    fn from_vec(x: &StateVec) -> Self {
        Self {
            p: Vector3::new(x[0], x[1], x[2]),
            psi: x[PSI],
            v: Vector3::new(x[4], x[5], x[6]),
            psi_dot: x[PSI_DOT],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.p.iter().chain(self.v.iter()).all(|v| v.is_finite())
            && self.psi.is_finite()
            && self.psi_dot.is_finite()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ControlInput {
    /// Commanded body-frame velocity (m/s).
    pub u_v: Vector3<f64>,
    /// Commanded heading rate (rad/s).
    pub u_psi: f64,
}

impl ControlInput {
    pub fn new(u_v: Vector3<f64>, u_psi: f64) -> Self {
        Self { u_v, u_psi }
    }

    fn as_array(&self) -> [f64; 4] {
        [self.u_v.x, self.u_v.y, self.u_v.z, self.u_psi]
    }

    fn from_slice(s: &[f64]) -> Self {
        Self {
            u_v: Vector3::new(s[0], s[1], s[2]),
            u_psi: s[3],
        }
    }
}

/// Standard deviations of the additive process noise, per state block.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ProcessNoise {
    pub position: f64,
    pub heading: f64,
    pub velocity: f64,
    pub heading_rate: f64,
}

impl ProcessNoise {
    pub fn is_zero(&self) -> bool {
        self.position == 0.0
            && self.heading == 0.0
            && self.velocity == 0.0
            && self.heading_rate == 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DynamicsParams {
    /// Velocity-loop time constant τ (s).
    pub tau: f64,
    /// Velocity input gain k.
    pub gain: f64,
    /// Heading-rate time constant τ_ψ (s).
    pub tau_heading: f64,
    /// Heading-rate input gain k_ψ.
    pub gain_heading: f64,
    /// Control period (s).
    pub dt: f64,
    /// RK4 substeps per control period.
    pub substeps: usize,
    pub noise: ProcessNoise,
}

impl DynamicsParams {
    /// Substeps are chosen so that each RK4 step spans at most 1/25 of the
    /// fastest time constant, which keeps the integration error of the linear
    /// velocity loops below 1e-7 relative per control period.
    pub fn new(tau: f64, gain: f64, tau_heading: f64, gain_heading: f64, dt: f64) -> Self {
        let fastest = tau.min(tau_heading);
        let substeps = ((25.0 * dt / fastest).ceil() as usize).max(1);
        Self {
            tau,
            gain,
            tau_heading,
            gain_heading,
            dt,
            substeps,
            noise: ProcessNoise::default(),
        }
    }

    pub fn validate(&self) -> Result<(), PlanError> {
        let positive = [
            ("tau", self.tau),
            ("tau_heading", self.tau_heading),
            ("dt", self.dt),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(PlanError::InvalidParams(format!("{name} must be positive")));
            }
        }
        if self.substeps == 0 {
            return Err(PlanError::InvalidParams(
                "substeps must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Rotation about the world z-axis by `psi`.
pub fn heading_rotation(psi: f64) -> Matrix3<f64> {
    let (s, c) = psi.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

fn rotation_derivative(psi: f64) -> Matrix3<f64> {
    let (s, c) = psi.sin_cos();
    Matrix3::new(-s, -c, 0.0, c, -s, 0.0, 0.0, 0.0, 0.0)
}

fn vector_field(x: &StateVec, u: &[f64; 4], dp: &DynamicsParams) -> StateVec {
    let v = Vector3::new(x[4], x[5], x[6]);
    let pdot = heading_rotation(x[PSI]) * v;
    let mut f = StateVec::zeros();
    f[0] = pdot.x;
    f[1] = pdot.y;
    f[2] = pdot.z;
    f[PSI] = x[PSI_DOT];
    for i in 0..3 {
        f[VX + i] = (-x[VX + i] + dp.gain * u[i]) / dp.tau;
    }
    f[PSI_DOT] = (-x[PSI_DOT] + dp.gain_heading * u[3]) / dp.tau_heading;
    f
}

fn state_jacobian(x: &StateVec, dp: &DynamicsParams) -> SMatrix<f64, 8, 8> {
    let mut j = SMatrix::<f64, 8, 8>::zeros();
    let v = Vector3::new(x[4], x[5], x[6]);
    let dr = rotation_derivative(x[PSI]) * v;
    let r = heading_rotation(x[PSI]);
    for i in 0..3 {
        j[(i, PSI)] = dr[i];
        for k in 0..3 {
            j[(i, VX + k)] = r[(i, k)];
        }
        j[(VX + i, VX + i)] = -1.0 / dp.tau;
    }
    j[(PSI, PSI_DOT)] = 1.0;
    j[(PSI_DOT, PSI_DOT)] = -1.0 / dp.tau_heading;
    j
}

/// Adds ∂f/∂u · e_{col..col+4} into `k`.
fn add_input_jacobian(k: &mut Sensitivity, col: usize, dp: &DynamicsParams) {
    for i in 0..3 {
        k[(VX + i, col + i)] += dp.gain / dp.tau;
    }
    k[(PSI_DOT, col + 3)] += dp.gain_heading / dp.tau_heading;
}

/// One control period of RK4 substeps. When `sens` is given it holds
/// `∂x/∂(all inputs)` on entry and is advanced alongside the state; the
/// current input occupies columns `col..col + 4`.
fn integrate(
    x: StateVec,
    u: &[f64; 4],
    dp: &DynamicsParams,
    sens: Option<(&mut Sensitivity, usize)>,
) -> StateVec {
    integrate_sampled(x, u, dp, sens, 1, &mut |_, _, _| {})
}

/// Substep after which sample `k` of `samples` is taken; the last sample is
/// the end of the period.
fn sample_substep(k: usize, samples: usize, substeps: usize) -> usize {
    ((k + 1) * substeps).div_ceil(samples)
}

/// As [`integrate`], calling `visit(k, x, s)` at `samples` evenly spaced
/// instants within the period.
fn integrate_sampled(
    x: StateVec,
    u: &[f64; 4],
    dp: &DynamicsParams,
    mut sens: Option<(&mut Sensitivity, usize)>,
    samples: usize,
    visit: &mut dyn FnMut(usize, &StateVec, Option<&Sensitivity>),
) -> StateVec {
    let h = dp.dt / dp.substeps as f64;
    let mut x = x;
    let mut next_sample = 0;
    for j in 0..dp.substeps {
        let k1 = vector_field(&x, u, dp);
        let x2 = x + k1 * (h / 2.0);
        let k2 = vector_field(&x2, u, dp);
        let x3 = x + k2 * (h / 2.0);
        let k3 = vector_field(&x3, u, dp);
        let x4 = x + k3 * h;
        let k4 = vector_field(&x4, u, dp);
        if let Some((s, col)) = sens.as_mut() {
            let col = *col;
            let stage = |xs: &StateVec, ss: &Sensitivity| {
                let mut k = state_jacobian(xs, dp) * ss;
                add_input_jacobian(&mut k, col, dp);
                k
            };
            let s1 = stage(&x, s);
            let s2 = stage(&x2, &(&**s + &s1 * (h / 2.0)));
            let s3 = stage(&x3, &(&**s + &s2 * (h / 2.0)));
            let s4 = stage(&x4, &(&**s + &s3 * h));
            **s += (s1 + s2 * 2.0 + s3 * 2.0 + s4) * (h / 6.0);
        }
        x += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        while next_sample < samples && sample_substep(next_sample, samples, dp.substeps) == j + 1 {
            visit(next_sample, &x, sens.as_ref().map(|(s, _)| &**s));
            next_sample += 1;
        }
    }
    x[PSI] = wrap_angle(x[PSI]);
    x
}

/// Advances the state by one control period without process noise.
pub fn dynamics_step(x: &AgentState, u: &ControlInput, params: &DynamicsParams) -> AgentState {
    AgentState::from_vec(&integrate(x.to_vec(), &u.as_array(), params, None))
}

/// Advances the state by one control period and adds zero-mean Gaussian
/// process noise with the standard deviations of `params.noise`.
pub fn dynamics_step_noisy<R: Rng + ?Sized>(
    x: &AgentState,
    u: &ControlInput,
    params: &DynamicsParams,
    rng: &mut R,
) -> AgentState {
    let mut next = dynamics_step(x, u, params);
    let n = params.noise;
    if n.is_zero() {
        return next;
    }
    let mut draw = |std: f64| {
        if std > 0.0 {
            Normal::new(0.0, std).expect("finite std").sample(rng)
        } else {
            0.0
        }
    };
    for i in 0..3 {
        next.p[i] += draw(n.position);
    }
    next.psi = wrap_angle(next.psi + draw(n.heading));
    for i in 0..3 {
        next.v[i] += draw(n.velocity);
    }
    next.psi_dot += draw(n.heading_rate);
    next
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PlanError {
    #[error("invalid planner parameters: {0}")]
    InvalidParams(String),
    #[error("expected {expected} {what}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("initial position lies outside the free-space estimate (clearance {0})")]
    StartOutside(f64),
    #[error("no trajectory satisfies the constraints (violation {:.3e})", .diagnostics.max_violation)]
    Infeasible { diagnostics: PlanDiagnostics },
}

/// Sum over the horizon of the `P`-weighted squared position error to the goal
/// and the `Q`-weighted squared input.
pub fn trajectory_cost(
    states: &[AgentState],
    inputs: &[ControlInput],
    goal: &Vector3<f64>,
    p: &Matrix3<f64>,
    q: &Matrix4<f64>,
) -> Result<f64, PlanError> {
    if states.len() != inputs.len() + 1 {
        return Err(PlanError::Dimension {
            what: "states",
            expected: inputs.len() + 1,
            got: states.len(),
        });
    }
    let mut total = 0.0;
    for (x, u) in states[1..].iter().zip(inputs) {
        let e = x.p - goal;
        let uv = nalgebra::Vector4::from(u.as_array());
        total += e.dot(&(p * e)) + uv.dot(&(q * uv));
    }
    Ok(total)
}

/// Componentwise bounds on inputs and on the body velocity and heading rate
/// of predicted states.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bounds {
    pub velocity_min: Vector3<f64>,
    pub velocity_max: Vector3<f64>,
    pub heading_rate_min: f64,
    pub heading_rate_max: f64,
    pub input_velocity_min: Vector3<f64>,
    pub input_velocity_max: Vector3<f64>,
    pub input_heading_rate_min: f64,
    pub input_heading_rate_max: f64,
}

impl Bounds {
    /// Symmetric bounds with identical state and input limits.
    pub fn symmetric(velocity: Vector3<f64>, heading_rate: f64) -> Self {
        Self {
            velocity_min: -velocity,
            velocity_max: velocity,
            heading_rate_min: -heading_rate,
            heading_rate_max: heading_rate,
            input_velocity_min: -velocity,
            input_velocity_max: velocity,
            input_heading_rate_min: -heading_rate,
            input_heading_rate_max: heading_rate,
        }
    }

    /// Largest speed allowed by the velocity box.
    pub fn max_speed(&self) -> f64 {
        self.velocity_min.abs().sup(&self.velocity_max.abs()).norm()
    }

    fn input_lo(&self) -> [f64; 4] {
        let v = self.input_velocity_min;
        [v.x, v.y, v.z, self.input_heading_rate_min]
    }

    fn input_hi(&self) -> [f64; 4] {
        let v = self.input_velocity_max;
        [v.x, v.y, v.z, self.input_heading_rate_max]
    }

    pub fn project(&self, u: &ControlInput) -> ControlInput {
        let (lo, hi) = (self.input_lo(), self.input_hi());
        let a = u.as_array();
        let c: Vec<f64> = (0..4).map(|i| a[i].clamp(lo[i], hi[i])).collect();
        ControlInput::from_slice(&c)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlannerParams {
    /// Horizon length N in control periods.
    pub horizon: usize,
    /// Position-error weight.
    pub p: Matrix3<f64>,
    /// Input weight, over `(u_v, u_ψ)`.
    pub q: Matrix4<f64>,
    pub bounds: Bounds,
    /// Accepted constraint violation (m for clearance).
    pub collision_tol: f64,
    /// Instants per control period at which clearance is enforced, evenly
    /// spaced and ending at the waypoint.
    pub clearance_samples: usize,
    pub max_iter: usize,
    /// Stop when the largest input update falls below this.
    pub convergence_tol: f64,
}

impl PlannerParams {
    pub fn new(horizon: usize, bounds: Bounds) -> Self {
        Self {
            horizon,
            p: Matrix3::identity(),
            q: Matrix4::identity(),
            bounds,
            collision_tol: 1e-6,
            clearance_samples: 4,
            max_iter: 100,
            convergence_tol: 1e-6,
        }
    }

    pub fn validate(&self) -> Result<(), PlanError> {
        if self.horizon == 0 {
            return Err(PlanError::InvalidParams(
                "horizon must be at least 1".into(),
            ));
        }
        if self.clearance_samples == 0 {
            return Err(PlanError::InvalidParams(
                "clearance_samples must be at least 1".into(),
            ));
        }
        let min_eig = |m: DMatrix<f64>| m.symmetric_eigen().eigenvalues.min();
        let p = DMatrix::from_column_slice(3, 3, self.p.as_slice());
        let q = DMatrix::from_column_slice(4, 4, self.q.as_slice());
        if (&p - p.transpose()).amax() > 1e-12 || min_eig(p) <= 0.0 {
            return Err(PlanError::InvalidParams(
                "P must be symmetric positive definite".into(),
            ));
        }
        if (&q - q.transpose()).amax() > 1e-12 || min_eig(q) <= 0.0 {
            return Err(PlanError::InvalidParams(
                "Q must be symmetric positive definite".into(),
            ));
        }
        let b = &self.bounds;
        let ordered = (0..3).all(|i| {
            b.velocity_min[i] <= b.velocity_max[i]
                && b.input_velocity_min[i] <= b.input_velocity_max[i]
        }) && b.heading_rate_min <= b.heading_rate_max
            && b.input_heading_rate_min <= b.input_heading_rate_max;
        if !ordered {
            return Err(PlanError::InvalidParams(
                "bounds must satisfy min ≤ max".into(),
            ));
        }
        if !(self.collision_tol >= 0.0) || !(self.convergence_tol > 0.0) {
            return Err(PlanError::InvalidParams(
                "tolerances must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Merit values around one accepted step, both at the penalty in force for
/// that step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeritStep {
    pub penalty: f64,
    pub before: f64,
    pub after: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PlanDiagnostics {
    pub iterations: usize,
    pub cost: f64,
    pub max_violation: f64,
    pub converged: bool,
    pub warm_started: bool,
    pub merit_history: Vec<MeritStep>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Plan {
    /// `u_0 … u_{N−1}`.
    pub inputs: Vec<ControlInput>,
    /// `x_0 … x_N`.
    pub states: Vec<AgentState>,
    pub diagnostics: PlanDiagnostics,
    /// Final quasi-Newton Hessian, reused by the next warm start.
    hessian: DMatrix<f64>,
}

/// Cost, constraints and their derivatives for a given input sequence.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub states: Vec<AgentState>,
    pub cost: f64,
    pub gradient: DVector<f64>,
    /// Gauss–Newton model of the cost Hessian.
    pub hessian: DMatrix<f64>,
    /// Constraint values, feasible when `≥ 0`.
    pub constraints: DVector<f64>,
    pub jacobian: DMatrix<f64>,
}

/// The single-shooting transcription of one planning problem. Decision
/// vector: `[u_0, …, u_{N−1}]`, four entries per period.
pub struct ShootingProblem<'a> {
    pub est: &'a FreeSpaceEstimate,
    pub x0: AgentState,
    pub goal: Vector3<f64>,
    pub params: &'a PlannerParams,
    pub dynamics: &'a DynamicsParams,
}

impl ShootingProblem<'_> {
    pub fn num_vars(&self) -> usize {
        4 * self.params.horizon
    }

    fn unpack(&self, u: &DVector<f64>) -> Vec<ControlInput> {
        u.as_slice()
            .chunks(4)
            .map(ControlInput::from_slice)
            .collect()
    }

    fn rollout(&self, u: &DVector<f64>) -> Vec<StateVec> {
        let mut x = self.x0.to_vec();
        let mut out = Vec::with_capacity(self.params.horizon + 1);
        out.push(x);
        for chunk in u.as_slice().chunks(4) {
            x = integrate(
                x,
                &[chunk[0], chunk[1], chunk[2], chunk[3]],
                self.dynamics,
                None,
            );
            out.push(x);
        }
        out
    }

    pub fn states(&self, u: &DVector<f64>) -> Vec<AgentState> {
        self.rollout(u).iter().map(AgentState::from_vec).collect()
    }

    /// Horizon cost of an input vector.
    pub fn cost(&self, u: &DVector<f64>) -> f64 {
        let states = self.states(u);
        trajectory_cost(
            &states,
            &self.unpack(u),
            &self.goal,
            &self.params.p,
            &self.params.q,
        )
        .expect("rollout has N + 1 states")
    }

    fn state_bound_rows(&self) -> Vec<(usize, f64, bool)> {
        // (state index, bound, is_lower)
        let b = &self.params.bounds;
        let mut rows = Vec::new();
        for i in 0..3 {
            rows.push((VX + i, b.velocity_min[i], true));
            rows.push((VX + i, b.velocity_max[i], false));
        }
        rows.push((PSI_DOT, b.heading_rate_min, true));
        rows.push((PSI_DOT, b.heading_rate_max, false));
        rows.retain(|r| r.1.is_finite());
        rows
    }

    /// Constraint values: clearance at every sample instant of periods
    /// `1 … N` (the last of each period being the waypoint `p_t`), then the
    /// state bounds of `x_1 … x_N`.
    pub fn constraints(&self, u: &DVector<f64>) -> DVector<f64> {
        let rows = self.state_bound_rows();
        let n = self.params.horizon;
        let m = self.params.clearance_samples;
        let mut c = DVector::zeros(n * (m + rows.len()));
        let mut x = self.x0.to_vec();
        for (t, chunk) in u.as_slice().chunks(4).enumerate() {
            let ut = [chunk[0], chunk[1], chunk[2], chunk[3]];
            x = integrate_sampled(x, &ut, self.dynamics, None, m, &mut |k, xs, _| {
                c[t * m + k] = signed_clearance(self.est, &Vector3::new(xs[0], xs[1], xs[2]));
            });
            for (k, &(idx, bound, lower)) in rows.iter().enumerate() {
                let v = x[idx];
                c[n * m + t * rows.len() + k] = if lower { v - bound } else { bound - v };
            }
        }
        c
    }

    /// Everything the SQP step needs, with analytic derivatives.
    pub fn evaluate(&self, u: &DVector<f64>) -> Evaluation {
        let n = self.params.horizon;
        let nv = self.num_vars();
        let rows = self.state_bound_rows();
        let mut x = self.x0.to_vec();
        let mut s = Sensitivity::zeros(nv);
        let mut states = vec![AgentState::from_vec(&x)];
        let mut cost = 0.0;
        let mut gradient = DVector::zeros(nv);
        let mut hessian = DMatrix::zeros(nv, nv);
        let m = self.params.clearance_samples;
        let mut constraints = DVector::zeros(n * (m + rows.len()));
        let mut jacobian = DMatrix::zeros(n * (m + rows.len()), nv);
        let p = &self.params.p;
        let q = &self.params.q;
        for t in 0..n {
            let ut = [u[4 * t], u[4 * t + 1], u[4 * t + 2], u[4 * t + 3]];
            x = integrate_sampled(
                x,
                &ut,
                self.dynamics,
                Some((&mut s, 4 * t)),
                m,
                &mut |k, xs, ss| {
                    let pos = Vector3::new(xs[0], xs[1], xs[2]);
                    let (g, grad_p) = self.est.clearance_with_gradient(&pos);
                    let ss = ss.expect("sensitivities are propagated");
                    constraints[t * m + k] = g;
                    jacobian
                        .row_mut(t * m + k)
                        .copy_from(&(grad_p.transpose() * ss.fixed_rows::<3>(PX)));
                },
            );
            states.push(AgentState::from_vec(&x));

            let pos = Vector3::new(x[0], x[1], x[2]);
            let sp = DMatrix::from_iterator(3, nv, s.fixed_rows::<3>(PX).iter().copied());
            let e = pos - self.goal;
            cost += e.dot(&(p * e));
            let pe = p * e;
            gradient += sp.transpose() * pe * 2.0;
            hessian += sp.transpose() * p * &sp * 2.0;

            let uv = nalgebra::Vector4::from(ut);
            cost += uv.dot(&(q * uv));
            let qu = q * uv;
            for i in 0..4 {
                gradient[4 * t + i] += 2.0 * qu[i];
                for j in 0..4 {
                    hessian[(4 * t + i, 4 * t + j)] += 2.0 * q[(i, j)];
                }
            }

            for (k, &(idx, bound, lower)) in rows.iter().enumerate() {
                let r = n * m + t * rows.len() + k;
                let sign = if lower { 1.0 } else { -1.0 };
                constraints[r] = sign * (x[idx] - bound);
                jacobian.row_mut(r).copy_from(&(s.row(idx) * sign));
            }
        }
        Evaluation {
            states,
            cost,
            gradient,
            hessian,
            constraints,
            jacobian,
        }
    }
}

fn violation(c: &DVector<f64>) -> (f64, f64) {
    let mut sum = 0.0;
    let mut max: f64 = 0.0;
    for v in c.iter() {
        if *v < 0.0 {
            sum -= v;
            max = max.max(-v);
        }
    }
    (sum, max)
}

/// Solves one planning problem.
///
/// `warm` is the previous plan. Its inputs are shifted by one period with
/// the last input repeated, and its quasi-Newton Hessian is shifted the same
/// way. Without it the solver starts from zero inputs and the Gauss–Newton
/// Hessian.
pub fn solve_mpc(
    est: &FreeSpaceEstimate,
    x0: &AgentState,
    goal: &Vector3<f64>,
    params: &PlannerParams,
    dynamics: &DynamicsParams,
    warm: Option<&Plan>,
) -> Result<Plan, PlanError> {
    params.validate()?;
    dynamics.validate()?;
    let start = Instant::now();
    if (x0.p - est.center()).norm() >= crate::freespace::EPS_CENTER {
        let c = signed_clearance(est, &x0.p);
        if c < -params.collision_tol {
            return Err(PlanError::StartOutside(c));
        }
    }
    let n = params.horizon;
    let nv = 4 * n;
    let prob = ShootingProblem {
        est,
        x0: *x0,
        goal: *goal,
        params,
        dynamics,
    };
    let bounds = &params.bounds;
    let (lo, hi) = (bounds.input_lo(), bounds.input_hi());

    let mut u = DVector::zeros(nv);
    if let Some(prev) = warm.map(|p| &p.inputs) {
        for t in 0..n {
            let src = prev.get(t + 1).or(prev.last()).copied().unwrap_or_default();
            let a = bounds.project(&src).as_array();
            u.rows_mut(4 * t, 4).copy_from_slice(&a);
        }
    }
    for t in 0..n {
        for i in 0..4 {
            u[4 * t + i] = u[4 * t + i].clamp(lo[i], hi[i]);
        }
    }

    let mut diag = PlanDiagnostics {
        warm_started: warm.is_some(),
        ..Default::default()
    };
    let mut penalty: f64 = 100.0;
    let mut best: Option<(DVector<f64>, f64, f64)> = None;
    let mut eval = prob.evaluate(&u);

    let consider =
        |best: &mut Option<(DVector<f64>, f64, f64)>, u: &DVector<f64>, cost: f64, viol: f64| {
            if viol <= params.collision_tol && best.as_ref().is_none_or(|b| cost < b.1) {
                *best = Some((u.clone(), cost, viol));
            }
        };
    consider(&mut best, &u, eval.cost, violation(&eval.constraints).1);

    let mut hessian = match warm {
        Some(p) if p.hessian.nrows() == nv => shift_hessian(&p.hessian),
        _ => eval.hessian.clone(),
    };
    for _ in 0..params.max_iter {
        diag.iterations += 1;
        let Some(sub) = sqp_step(&eval, &hessian, &u, &lo, &hi, penalty) else {
            break;
        };
        let StepResult {
            step,
            slack_sum,
            multipliers,
        } = sub;
        let lambda_max = multipliers.iter().copied().fold(0.0, f64::max);
        if lambda_max > 0.5 * penalty {
            penalty = (penalty * 10.0).max(2.0 * lambda_max);
        }
        let (viol_sum, _) = violation(&eval.constraints);
        let merit = eval.cost + penalty * viol_sum;
        let slope = eval.gradient.dot(&step) - penalty * (viol_sum - slack_sum);
        let step_size = step.amax();

        if step_size <= params.convergence_tol {
            diag.converged = violation(&eval.constraints).1 <= params.collision_tol;
            break;
        }

        let mut alpha = 1.0;
        let mut accepted = None;
        while alpha > 1e-10 {
            let mut trial = &u + &step * alpha;
            for t in 0..n {
                for i in 0..4 {
                    trial[4 * t + i] = trial[4 * t + i].clamp(lo[i], hi[i]);
                }
            }
            let c = prob.constraints(&trial);
            let cost = prob.cost(&trial);
            let m = cost + penalty * violation(&c).0;
            if m <= merit + 1e-4 * alpha * slope.min(0.0) {
                accepted = Some((trial, m));
                break;
            }
            alpha *= 0.5;
        }
        let Some((next, merit_after)) = accepted else {
            break;
        };
        diag.merit_history.push(MeritStep {
            penalty,
            before: merit,
            after: merit_after,
        });
        let moved = (&next - &u).amax();
        let s_step = &next - &u;
        let grad_before = &eval.gradient - eval.jacobian.tr_mul(&multipliers);
        u = next;
        eval = prob.evaluate(&u);
        let grad_after = &eval.gradient - eval.jacobian.tr_mul(&multipliers);
        damped_bfgs_update(&mut hessian, &s_step, &(grad_after - grad_before));
        let (_, vmax) = violation(&eval.constraints);
        consider(&mut best, &u, eval.cost, vmax);
        if moved <= params.convergence_tol && vmax <= params.collision_tol {
            diag.converged = true;
            break;
        }
    }

    let (_, vmax) = violation(&eval.constraints);
    let (u_final, cost, viol) = if vmax <= params.collision_tol {
        (u, eval.cost, vmax)
    } else if let Some(b) = best {
        diag.converged = false;
        b
    } else {
        diag.cost = eval.cost;
        diag.max_violation = vmax;
        diag.seconds = start.elapsed().as_secs_f64();
        return Err(PlanError::Infeasible { diagnostics: diag });
    };
    diag.cost = cost;
    diag.max_violation = viol;
    diag.seconds = start.elapsed().as_secs_f64();
    Ok(Plan {
        states: prob.states(&u_final),
        inputs: prob.unpack(&u_final),
        diagnostics: diag,
        hessian,
    })
}

/// Drops the first input block and repeats the last diagonal block, keeping
/// the matrix positive definite.
fn shift_hessian(h: &DMatrix<f64>) -> DMatrix<f64> {
    let nv = h.nrows();
    let mut out = DMatrix::zeros(nv, nv);
    if nv > 4 {
        out.view_mut((0, 0), (nv - 4, nv - 4))
            .copy_from(&h.view((4, 4), (nv - 4, nv - 4)));
    }
    out.view_mut((nv - 4, nv - 4), (4, 4))
        .copy_from(&h.view((nv - 4, nv - 4), (4, 4)));
    out
}

/// Powell-damped BFGS update, which keeps `b` positive definite.
fn damped_bfgs_update(b: &mut DMatrix<f64>, s: &DVector<f64>, y: &DVector<f64>) {
    let bs = &*b * s;
    let sbs = s.dot(&bs);
    if sbs <= 1e-16 * s.norm_squared().max(1e-300) {
        return;
    }
    let sy = s.dot(y);
    let r = if sy >= 0.2 * sbs {
        y.clone()
    } else {
        let theta = 0.8 * sbs / (sbs - sy);
        y * theta + &bs * (1.0 - theta)
    };
    let sr = s.dot(&r);
    *b += &r * r.transpose() / sr - &bs * bs.transpose() / sbs;
    let sym = (&*b + b.transpose()) * 0.5;
    *b = sym;
}

struct StepResult {
    step: DVector<f64>,
    slack_sum: f64,
    /// One non-negative multiplier per nonlinear constraint.
    multipliers: DVector<f64>,
}

/// Solves the QP subproblem. The linearized constraints are tried as hard
/// constraints first; when they are inconsistent the elastic form, with one
/// penalized slack per constraint, is solved instead.
fn sqp_step(
    eval: &Evaluation,
    hessian: &DMatrix<f64>,
    u: &DVector<f64>,
    lo: &[f64; 4],
    hi: &[f64; 4],
    penalty: f64,
) -> Option<StepResult> {
    let nv = u.len();
    let nc = eval.constraints.len();
    let scale = hessian.diagonal().amax().max(1.0);
    let opts = QpOptions {
        tol: 1e-10,
        max_iter: 2000,
    };
    let solve = |qp: DenseQp| match qp.solve(&opts) {
        Ok(s) => Ok(s),
        Err(QpError::MaxIterations { best }) => Ok(*best),
        Err(e) => Err(e),
    };

    let mut h = hessian.clone();
    for i in 0..nv {
        h[(i, i)] += 1e-9 * scale;
    }
    let mut rows = DMatrix::zeros(nc + nv, nv);
    let mut lower = DVector::from_element(nc + nv, f64::NEG_INFINITY);
    let mut upper = DVector::from_element(nc + nv, f64::INFINITY);
    rows.view_mut((0, 0), (nc, nv)).copy_from(&eval.jacobian);
    for i in 0..nc {
        lower[i] = -eval.constraints[i];
    }
    for j in 0..nv {
        rows[(nc + j, j)] = 1.0;
        lower[nc + j] = lo[j % 4] - u[j];
        upper[nc + j] = hi[j % 4] - u[j];
    }
    let hard = DenseQp {
        hessian: h.clone(),
        linear: eval.gradient.clone(),
        rows: rows.clone(),
        lower: lower.clone(),
        upper: upper.clone(),
    };
    match solve(hard) {
        Ok(sol) => {
            let multipliers = sol.row_multipliers(nc + nv).rows(0, nc).map(|l| l.max(0.0));
            return Some(StepResult {
                step: sol.x,
                slack_sum: 0.0,
                multipliers,
            });
        }
        Err(QpError::Infeasible { .. }) => {}
        Err(_) => return None,
    }

    let nz = nv + nc;
    let mut he = DMatrix::zeros(nz, nz);
    he.view_mut((0, 0), (nv, nv)).copy_from(&h);
    for i in nv..nz {
        he[(i, i)] = 1.0;
    }
    let mut g = DVector::zeros(nz);
    g.rows_mut(0, nv).copy_from(&eval.gradient);
    g.rows_mut(nv, nc).fill(penalty);
    let m = 2 * nc + nv;
    let mut erows = DMatrix::zeros(m, nz);
    erows.view_mut((0, 0), (nc + nv, nv)).copy_from(&rows);
    let mut elower = DVector::from_element(m, f64::NEG_INFINITY);
    let mut eupper = DVector::from_element(m, f64::INFINITY);
    elower.rows_mut(0, nc + nv).copy_from(&lower);
    eupper.rows_mut(0, nc + nv).copy_from(&upper);
    for i in 0..nc {
        erows[(i, nv + i)] = 1.0;
        erows[(nc + nv + i, nv + i)] = 1.0;
        elower[nc + nv + i] = 0.0;
    }
    let sol = solve(DenseQp {
        hessian: he,
        linear: g,
        rows: erows,
        lower: elower,
        upper: eupper,
    })
    .ok()?;
    let multipliers = sol.row_multipliers(m).rows(0, nc).map(|l| l.max(0.0));
    Some(StepResult {
        step: sol.x.rows(0, nv).into_owned(),
        slack_sum: sol.x.rows(nv, nc).iter().map(|s| s.max(0.0)).sum(),
        multipliers,
    })
}

/// Stateful planner carrying the warm start between control periods.
#[derive(Debug, Clone)]
pub struct Planner {
    pub params: PlannerParams,
    pub dynamics: DynamicsParams,
    previous: Option<Plan>,
}

impl Planner {
    pub fn new(params: PlannerParams, dynamics: DynamicsParams) -> Result<Self, PlanError> {
        params.validate()?;
        dynamics.validate()?;
        Ok(Self {
            params,
            dynamics,
            previous: None,
        })
    }

    pub fn plan(
        &mut self,
        est: &FreeSpaceEstimate,
        x0: &AgentState,
        goal: &Vector3<f64>,
    ) -> Result<Plan, PlanError> {
        let result = solve_mpc(
            est,
            x0,
            goal,
            &self.params,
            &self.dynamics,
            self.previous.as_ref(),
        );
        match &result {
            Ok(plan) => self.previous = Some(plan.clone()),
            Err(_) => self.previous = None,
        }
        result
    }

    /// Drops the warm start.
    pub fn reset(&mut self) {
        self.previous = None;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::freespace::SolveDiagnostics;
    use crate::sh_basis::RealShExpansion;
    use std::f64::consts::PI;

    fn dyn_params() -> DynamicsParams {
        DynamicsParams::new(0.3, 1.0, 0.3, 1.0, 0.5)
    }

    fn sphere(radius: f64, center: Vector3<f64>) -> FreeSpaceEstimate {
        FreeSpaceEstimate {
            expansion: RealShExpansion::sphere(radius, 4, center),
            roi_radius: radius + 0.5,
            diagnostics: SolveDiagnostics::default(),
        }
    }

    #[test]
    fn rotation_examples() {
        assert_eq!(heading_rotation(0.0), Matrix3::identity());
        let r = heading_rotation(PI / 2.0);
        assert!((r * Vector3::x() - Vector3::y()).norm() < 1e-15);
        for psi in [-2.0, 0.3, 1.7] {
            let r = heading_rotation(psi);
            assert!((r * heading_rotation(-psi) - Matrix3::identity()).amax() < 1e-12);
            assert!((r.determinant() - 1.0).abs() < 1e-12);
            assert!((r.transpose() * r - Matrix3::identity()).amax() < 1e-12);
        }
    }

    #[test]
    fn wrap_angle_range() {
        assert_eq!(wrap_angle(PI), PI);
        assert!((wrap_angle(-PI) - PI).abs() < 1e-15);
        assert!((wrap_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-12);
        assert!((wrap_angle(0.25)) == 0.25);
    }

    #[test]
    fn equilibrium_is_fixed() {
        let x = AgentState::at_rest(Vector3::new(1.0, 2.0, 3.0));
        let next = dynamics_step(&x, &ControlInput::default(), &dyn_params());
        assert_eq!(next, x);
    }

    #[test]
    fn velocity_settles_after_five_time_constants() {
        let dp = DynamicsParams::new(0.3, 1.0, 0.3, 1.0, 0.3);
        let u = ControlInput::new(Vector3::new(1.0, -0.5, 0.2), 0.0);
        let mut x = AgentState::at_rest(Vector3::zeros());
        for _ in 0..5 {
            x = dynamics_step(&x, &u, &dp);
        }
        assert!((x.v - u.u_v).norm() < 0.01 * u.u_v.norm());
    }

    #[test]
    fn heading_rate_loop_mirrors_velocity_loop() {
        let dp = dyn_params();
        let u = ControlInput::new(Vector3::zeros(), 0.8);
        let x = dynamics_step(&AgentState::at_rest(Vector3::zeros()), &u, &dp);
        let expected = 0.8 * (1.0 - (-0.5f64 / 0.3).exp());
        assert!((x.psi_dot - expected).abs() < 1e-7);
        assert!(x.psi > 0.0);
    }

    #[test]
    fn cost_examples() {
        let goal = Vector3::new(1.0, 2.0, 3.0);
        let at_goal = AgentState::at_rest(goal);
        let p = Matrix3::identity();
        let q = Matrix4::identity();
        let zero = ControlInput::default();
        assert_eq!(
            trajectory_cost(&[at_goal, at_goal], &[zero], &goal, &p, &q).unwrap(),
            0.0
        );
        let off = AgentState::at_rest(goal + Vector3::x());
        assert_eq!(
            trajectory_cost(&[at_goal, off], &[zero], &goal, &p, &q).unwrap(),
            1.0
        );
        assert!(trajectory_cost(&[at_goal], &[zero], &goal, &p, &q).is_err());
    }

    #[test]
    fn params_validation() {
        let mut params = PlannerParams::new(4, Bounds::symmetric(Vector3::repeat(1.0), 1.0));
        assert!(params.validate().is_ok());
        params.p[(0, 0)] = -1.0;
        assert!(params.validate().is_err());
        let params = PlannerParams::new(0, Bounds::symmetric(Vector3::repeat(1.0), 1.0));
        assert!(params.validate().is_err());
        let mut dp = dyn_params();
        dp.tau = 0.0;
        assert!(dp.validate().is_err());
    }

    #[test]
    fn open_space_plan_is_locally_optimal() {
        let est = sphere(4.0, Vector3::zeros());
        let params = PlannerParams::new(4, Bounds::symmetric(Vector3::repeat(1.0), 1.0));
        let dp = dyn_params();
        let goal = Vector3::new(1.5, 0.5, 0.0);
        let x0 = AgentState::at_rest(Vector3::zeros());
        let plan = solve_mpc(&est, &x0, &goal, &params, &dp, None).unwrap();
        assert!(plan.diagnostics.converged);
        let prob = ShootingProblem {
            est: &est,
            x0,
            goal,
            params: &params,
            dynamics: &dp,
        };
        let u: Vec<f64> = plan.inputs.iter().flat_map(|c| c.as_array()).collect();
        let u = DVector::from_vec(u);
        let best = prob.cost(&u);
        assert!(best < prob.cost(&DVector::zeros(16)));
        for i in 0..16 {
            for h in [-1e-3, 1e-3] {
                let mut v = u.clone();
                v[i] = (v[i] + h).clamp(-1.0, 1.0);
                assert!(prob.cost(&v) >= best - 1e-10, "coordinate {i} improves");
            }
        }
        assert!((plan.states.last().unwrap().p - goal).norm() < goal.norm());
    }

    #[test]
    fn waypoints_stay_inside_small_sphere() {
        let est = sphere(0.6, Vector3::zeros());
        let params = PlannerParams::new(4, Bounds::symmetric(Vector3::repeat(1.0), 1.0));
        let plan = solve_mpc(
            &est,
            &AgentState::at_rest(Vector3::zeros()),
            &Vector3::new(5.0, 0.0, 0.0),
            &params,
            &dyn_params(),
            None,
        )
        .unwrap();
        for s in &plan.states[1..] {
            assert!(signed_clearance(&est, &s.p) >= -1e-6);
        }
        let last = plan.states.last().unwrap().p;
        assert!(
            last.x > 0.5,
            "should press against the boundary, got {last:?}"
        );
    }

    #[test]
    fn start_outside_is_rejected() {
        let est = sphere(1.0, Vector3::zeros());
        let params = PlannerParams::new(2, Bounds::symmetric(Vector3::repeat(1.0), 1.0));
        let x0 = AgentState::at_rest(Vector3::new(3.0, 0.0, 0.0));
        assert!(matches!(
            solve_mpc(&est, &x0, &Vector3::zeros(), &params, &dyn_params(), None),
            Err(PlanError::StartOutside(_))
        ));
    }
}
