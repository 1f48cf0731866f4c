//! Box worlds, a ray-cast range sensor and the closed sense → estimate →
//! plan → act loop.

use std::time::Instant;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::freespace::{estimate_freespace, EstimationParams, FreeSpaceEstimate, SolveDiagnostics};
use crate::geometry::{
    clamp_to_roi, erode_by_agent_ball, erode_by_agent_radius, fibonacci_covering_angle,
    fibonacci_directions, roi_radius, BallErosion, Direction, PointCloud, DEFAULT_EPS_R,
};
use crate::planner::{
    dynamics_step, dynamics_step_noisy, AgentState, Bounds, ControlInput, DynamicsParams,
    PlanDiagnostics, Planner, PlannerParams,
};
use crate::sh_basis::coefficient_count;

/// Consecutive failed planning steps tolerated before giving up.
pub const MAX_CONSECUTIVE_FAILURES: usize = 5;

/// An axis-aligned box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxObstacle {
    pub center: Vector3<f64>,
    pub half_extents: Vector3<f64>,
}

impl BoxObstacle {
    pub fn new(center: Vector3<f64>, half_extents: Vector3<f64>) -> Result<Self, ScenarioError> {
        if half_extents.iter().any(|h| !(*h > 0.0 && h.is_finite())) {
            return Err(ScenarioError::new(
                "half_extents",
                "every half extent must be positive and finite",
            ));
        }
        Ok(Self {
            center,
            half_extents,
        })
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        (p - self.center)
            .abs()
            .iter()
            .zip(self.half_extents.iter())
            .all(|(d, h)| d <= h)
    }

    /// Euclidean distance to the surface, negative inside.
    pub fn signed_distance(&self, p: &Vector3<f64>) -> f64 {
        let q = (p - self.center).abs() - self.half_extents;
        let outside = q.sup(&Vector3::zeros()).norm();
        let inside = q.max().min(0.0);
        outside + inside
    }
}

/// Nearest non-negative hit distance along the ray `origin + t·dir`, or
/// `None` when the ray misses. An origin inside the closed box gives 0.
pub fn ray_box_intersect(
    origin: &Vector3<f64>,
    dir: &Vector3<f64>,
    b: &BoxObstacle,
) -> Option<f64> {
    let lo = b.center - b.half_extents;
    let hi = b.center + b.half_extents;
    let mut t_near = f64::NEG_INFINITY;
    let mut t_far = f64::INFINITY;
    for i in 0..3 {
        if dir[i] == 0.0 {
            if origin[i] < lo[i] || origin[i] > hi[i] {
                return None;
            }
            continue;
        }
        let t1 = (lo[i] - origin[i]) / dir[i];
        let t2 = (hi[i] - origin[i]) / dir[i];
        t_near = t_near.max(t1.min(t2));
        t_far = t_far.min(t1.max(t2));
    }
    if t_near > t_far || t_far < 0.0 {
        return None;
    }
    Some(t_near.max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SensorParams {
    /// Rays cast along Fibonacci directions.
    pub rays: usize,
    pub max_range: f64,
    /// Standard deviation of the radial range noise (m).
    pub noise_std: f64,
}

/// Casts `sensor.rays` rays from the agent position. Each hit within range
/// becomes one point in the agent-centered frame; misses produce nothing.
pub fn simulate_scan<R: Rng + ?Sized>(
    state: &AgentState,
    obstacles: &[BoxObstacle],
    sensor: &SensorParams,
    rng: &mut R,
) -> PointCloud {
    let noise =
        (sensor.noise_std > 0.0).then(|| Normal::new(0.0, sensor.noise_std).expect("finite std"));
    let mut points = Vec::new();
    for d in fibonacci_directions(sensor.rays) {
        let u = d.unit();
        let hit = obstacles
            .iter()
            .filter_map(|b| ray_box_intersect(&state.p, &u, b))
            .fold(f64::INFINITY, f64::min);
        if hit > sensor.max_range {
            continue;
        }
        let range = match &noise {
            Some(n) => (hit + n.sample(rng)).max(DEFAULT_EPS_R),
            None => hit,
        };
        points.push(u * range);
    }
    PointCloud::new(points, state.p)
}

/// Distance from `p` to the nearest box surface (negative inside a box)
/// minus the agent radius. Infinite in an empty world.
pub fn ground_truth_clearance(p: &Vector3<f64>, obstacles: &[BoxObstacle], r_a: f64) -> f64 {
    obstacles
        .iter()
        .map(|b| b.signed_distance(p))
        .fold(f64::INFINITY, f64::min)
        - r_a
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dims {
    Two,
    Three,
}

/// Gap between two obstacles of width `w_b` that a spherical agent of radius
/// `r_a` needs once the obstacles are wrapped in bounding circles (2D) or
/// spheres (3D).
pub fn required_gap(r_a: f64, w_b: f64, dims: Dims) -> f64 {
    let factor = match dims {
        Dims::Two => 2f64.sqrt(),
        Dims::Three => 3f64.sqrt(),
    };
    2.0 * r_a + w_b * (factor - 1.0)
}

/// How measured points are shrunk so the agent can be treated as a point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Erosion {
    /// Subtract the agent radius along each measured ray. Underestimates
    /// the required shrinkage where a surface is hit obliquely.
    Radial,
    /// Free radius of a ball of the agent radius slid out along every ray
    /// direction.
    #[default]
    Ball,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimationSettings {
    pub max_order: usize,
    pub soft_directions: usize,
    pub weight_cap_factor: f64,
    pub tol: f64,
    pub max_iter: usize,
    pub erosion: Erosion,
    /// Clearance kept from measured returns where possible (ball erosion).
    pub buffer: f64,
    /// Fraction of the remaining distance to a return granted inside the
    /// buffer (ball erosion).
    pub approach: f64,
}

impl Default for EstimationSettings {
    fn default() -> Self {
        Self {
            max_order: 4,
            soft_directions: 1000,
            weight_cap_factor: 4.0,
            tol: 1e-6,
            max_iter: 500,
            erosion: Erosion::Ball,
            buffer: 0.05,
            approach: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub start: AgentState,
    pub goal: Vector3<f64>,
    pub agent_radius: f64,
    pub obstacles: Vec<BoxObstacle>,
    pub sensor: SensorParams,
    pub estimation: EstimationSettings,
    pub planner: PlannerParams,
    pub dynamics: DynamicsParams,
    pub max_steps: usize,
    pub goal_tolerance: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("{field}: {reason}")]
pub struct ScenarioError {
    pub field: String,
    pub reason: String,
}

impl ScenarioError {
    pub fn new(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

impl Scenario {
    /// A scenario with the stock settings: agent radius 0.5 m, 1000 rays of
    /// 10 m, order-4 fits on 1000 soft directions, τ = 0.3 s, dt = 0.5 s,
    /// N = 4 and unit bounds on commanded velocity and heading rate.
    pub fn with_defaults(
        start: Vector3<f64>,
        goal: Vector3<f64>,
        obstacles: Vec<BoxObstacle>,
    ) -> Self {
        Self {
            start: AgentState::at_rest(start),
            goal,
            agent_radius: 0.5,
            obstacles,
            sensor: SensorParams {
                rays: 1000,
                max_range: 10.0,
                noise_std: 0.0,
            },
            estimation: EstimationSettings::default(),
            planner: PlannerParams::new(4, Bounds::symmetric(Vector3::repeat(1.0), 1.0)),
            dynamics: DynamicsParams::new(0.3, 1.0, 0.3, 1.0, 0.5),
            max_steps: 300,
            goal_tolerance: 0.3,
            seed: 7,
        }
    }

    /// Two 2 × 2 × 4 m boxes leaving a 1.4 m gap at the origin, narrower than
    /// [`required_gap`] for a 0.5 m agent past 2 m obstacles. The agent starts
    /// beside the gap and must fly through it.
    pub fn corridor() -> Self {
        let half = Vector3::new(1.0, 1.0, 2.0);
        let boxes = [1.7, -1.7].map(|y| BoxObstacle {
            center: Vector3::new(0.0, y, 0.0),
            half_extents: half,
        });
        Self::with_defaults(
            Vector3::new(-6.0, 1.7, 0.0),
            Vector3::new(5.0, 0.0, 0.0),
            boxes.to_vec(),
        )
    }

    /// Region-of-interest radius: farthest travel within the horizon plus the
    /// agent radius.
    pub fn roi_radius(&self) -> f64 {
        let horizon = self.planner.horizon as f64 * self.dynamics.dt;
        roi_radius(self.planner.bounds.max_speed(), horizon, self.agent_radius)
    }

    pub fn estimation_params(&self) -> EstimationParams {
        let roi = self.roi_radius();
        let e = &self.estimation;
        EstimationParams {
            max_order: e.max_order,
            soft_directions: e.soft_directions,
            free_radius: roi - self.agent_radius,
            roi_radius: roi,
            weight_cap_factor: e.weight_cap_factor,
            tol: e.tol,
            max_iter: e.max_iter,
        }
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let positive = |field: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(ScenarioError::new(field, "must be positive and finite"))
            }
        };
        if !self.start.is_finite() {
            return Err(ScenarioError::new("start", "must be finite"));
        }
        if self.goal.iter().any(|g| !g.is_finite()) {
            return Err(ScenarioError::new("goal", "must be finite"));
        }
        if !(self.agent_radius >= 0.0 && self.agent_radius.is_finite()) {
            return Err(ScenarioError::new(
                "agent_radius",
                "must be non-negative and finite",
            ));
        }
        positive("goal_tolerance", self.goal_tolerance)?;
        positive("sensor.max_range", self.sensor.max_range)?;
        if !(self.sensor.noise_std >= 0.0 && self.sensor.noise_std.is_finite()) {
            return Err(ScenarioError::new(
                "sensor.noise_std",
                "must be non-negative and finite",
            ));
        }
        for (i, b) in self.obstacles.iter().enumerate() {
            if b.half_extents.iter().any(|h| !(*h > 0.0 && h.is_finite())) {
                return Err(ScenarioError::new(
                    format!("obstacles[{i}].half_extents"),
                    "must be positive",
                ));
            }
        }
        let k = coefficient_count(self.estimation.max_order);
        if self.sensor.rays < k {
            return Err(ScenarioError::new(
                "sensor.rays",
                format!("must be at least (L_max+1)² = {k}"),
            ));
        }
        if self.estimation.soft_directions < k {
            return Err(ScenarioError::new(
                "estimation.soft_directions",
                format!("must be at least (L_max+1)² = {k}"),
            ));
        }
        positive(
            "estimation.weight_cap_factor",
            self.estimation.weight_cap_factor,
        )?;
        positive("estimation.tol", self.estimation.tol)?;
        if self.max_steps == 0 {
            return Err(ScenarioError::new("max_steps", "must be at least 1"));
        }
        self.planner
            .validate()
            .map_err(|e| ScenarioError::new("planner", e.to_string()))?;
        self.dynamics
            .validate()
            .map_err(|e| ScenarioError::new("dynamics", e.to_string()))?;
        positive(
            "planner.bounds (max speed)",
            self.planner.bounds.max_speed(),
        )?;
        let n = self.dynamics.noise;
        if [n.position, n.heading, n.velocity, n.heading_rate]
            .iter()
            .any(|s| !(*s >= 0.0 && s.is_finite()))
        {
            return Err(ScenarioError::new(
                "dynamics.noise",
                "standard deviations must be non-negative",
            ));
        }
        let c = ground_truth_clearance(&self.start.p, &self.obstacles, self.agent_radius);
        if c < 0.0 {
            return Err(ScenarioError::new(
                "start",
                format!("agent overlaps an obstacle (clearance {c:.3})"),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    ReachedGoal,
    Timeout,
    Collision,
    PlannerFailure,
}

/// Wall-clock seconds spent in each phase of a step.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PhaseTimes {
    pub scan: f64,
    pub preprocess: f64,
    pub estimate: f64,
    pub plan: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    /// Simulation time at the start of the step (s).
    pub time: f64,
    /// State at the start of the step.
    pub state: AgentState,
    /// Input applied over the step.
    pub input: ControlInput,
    /// Weights of the fitted field, empty when estimation failed.
    pub weights: Vec<f64>,
    pub times: PhaseTimes,
    /// Smallest ground-truth clearance over the step.
    pub min_clearance: f64,
    /// Returns in the scan.
    pub points: usize,
    pub estimate: Option<SolveDiagnostics>,
    pub plan: Option<PlanDiagnostics>,
    /// Whether the planner returned a feasible plan.
    pub feasible: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryLog {
    pub records: Vec<StepRecord>,
    pub final_state: AgentState,
    pub outcome: Outcome,
}

impl TrajectoryLog {
    pub fn min_clearance(&self) -> f64 {
        self.records
            .iter()
            .map(|r| r.min_clearance)
            .fold(f64::INFINITY, f64::min)
    }

    pub fn all_feasible(&self) -> bool {
        self.records.iter().all(|r| r.feasible)
    }

    pub fn path_length(&self) -> f64 {
        let mut len = 0.0;
        let mut prev: Option<Vector3<f64>> = None;
        for p in self
            .records
            .iter()
            .map(|r| r.state.p)
            .chain(std::iter::once(self.final_state.p))
        {
            if let Some(q) = prev {
                len += (p - q).norm();
            }
            prev = Some(p);
        }
        len
    }
}

/// Points sampled per step when checking ground-truth clearance between
/// control instants.
const CLEARANCE_SAMPLES: usize = 5;

fn segment_clearance(
    x: &AgentState,
    u: &ControlInput,
    scenario: &Scenario,
    end: &AgentState,
) -> f64 {
    let mut sub = scenario.dynamics;
    sub.dt /= CLEARANCE_SAMPLES as f64;
    sub.substeps = sub.substeps.div_ceil(CLEARANCE_SAMPLES).max(1);
    let mut y = *x;
    let mut min = ground_truth_clearance(&end.p, &scenario.obstacles, scenario.agent_radius);
    for _ in 0..CLEARANCE_SAMPLES {
        y = dynamics_step(&y, u, &sub);
        min = min.min(ground_truth_clearance(
            &y.p,
            &scenario.obstacles,
            scenario.agent_radius,
        ));
    }
    min
}

/// Scan, preprocess and fit one free-space estimate at `state`. Returns the
/// estimate (or the reason it failed), the raw point count and phase times.
pub fn sense_and_estimate<R: Rng + ?Sized>(
    scenario: &Scenario,
    state: &AgentState,
    rays: &[Direction],
    rng: &mut R,
) -> (
    Result<FreeSpaceEstimate, crate::freespace::FreeSpaceError>,
    usize,
    PhaseTimes,
) {
    let mut times = PhaseTimes::default();
    let t = Instant::now();
    let cloud = simulate_scan(state, &scenario.obstacles, &scenario.sensor, rng);
    times.scan = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let roi = scenario.roi_radius();
    let r_a = scenario.agent_radius;
    let measured = match scenario.estimation.erosion {
        Erosion::Radial => erode_by_agent_radius(&clamp_to_roi(&cloud, roi), r_a, DEFAULT_EPS_R),
        Erosion::Ball => {
            let e = BallErosion {
                spread: fibonacci_covering_angle(rays.len()),
                buffer: scenario.estimation.buffer,
                approach: scenario.estimation.approach,
                ..BallErosion::new(roi, r_a)
            };
            erode_by_agent_ball(&cloud, rays, &e)
        }
    };
    times.preprocess = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let est = estimate_freespace(&measured, &scenario.estimation_params());
    times.estimate = t.elapsed().as_secs_f64();
    (est, cloud.len(), times)
}

/// Runs the receding-horizon loop until the goal is reached, the agent
/// collides, planning fails repeatedly or `max_steps` elapse.
pub fn run_closed_loop(scenario: &Scenario) -> Result<TrajectoryLog, ScenarioError> {
    scenario.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);
    let mut planner = Planner::new(scenario.planner.clone(), scenario.dynamics)
        .map_err(|e| ScenarioError::new("planner", e.to_string()))?;
    let rays = fibonacci_directions(scenario.sensor.rays);
    let mut x = scenario.start;
    let mut records = Vec::new();
    let mut failures = 0;
    let at_goal = |x: &AgentState| (x.p - scenario.goal).norm() <= scenario.goal_tolerance;

    let mut outcome = Outcome::Timeout;
    if at_goal(&x) {
        outcome = Outcome::ReachedGoal;
    }
    while outcome == Outcome::Timeout && records.len() < scenario.max_steps {
        let step = records.len();
        let (est, points, mut times) = sense_and_estimate(scenario, &x, &rays, &mut rng);

        let t = Instant::now();
        let (plan, weights, est_diag) = match &est {
            Ok(e) => (
                Some(planner.plan(e, &x, &scenario.goal)),
                e.expansion.weights().to_vec(),
                Some(e.diagnostics),
            ),
            Err(_) => {
                planner.reset();
                (None, Vec::new(), None)
            }
        };
        times.plan = t.elapsed().as_secs_f64();

        let (input, plan_diag, feasible) = match plan {
            Some(Ok(p)) => (p.inputs[0], Some(p.diagnostics), true),
            Some(Err(crate::planner::PlanError::Infeasible { diagnostics })) => {
                (ControlInput::default(), Some(diagnostics), false)
            }
            _ => (ControlInput::default(), None, false),
        };
        failures = if feasible { 0 } else { failures + 1 };

        let next = dynamics_step_noisy(&x, &input, &scenario.dynamics, &mut rng);
        let min_clearance = segment_clearance(&x, &input, scenario, &next);
        records.push(StepRecord {
            step,
            time: step as f64 * scenario.dynamics.dt,
            state: x,
            input,
            weights,
            times,
            min_clearance,
            points,
            estimate: est_diag,
            plan: plan_diag,
            feasible,
        });
        x = next;

        if min_clearance < 0.0 {
            outcome = Outcome::Collision;
        } else if at_goal(&x) {
            outcome = Outcome::ReachedGoal;
        } else if failures >= MAX_CONSECUTIVE_FAILURES {
            outcome = Outcome::PlannerFailure;
        }
    }
    Ok(TrajectoryLog {
        records,
        final_state: x,
        outcome,
    })
}
