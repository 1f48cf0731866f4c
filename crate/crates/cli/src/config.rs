//! TOML scenario files.
//!
//! Only `format_version`, `goal` and `agent.position` are required; every
//! other field falls back to [`Scenario::with_defaults`]. Unknown keys are
//! rejected so that typos do not silently fall back to defaults.

use std::path::Path;

use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};
use shplan::planner::{AgentState, Bounds, DynamicsParams, PlannerParams, ProcessNoise};
use shplan::sim::{BoxObstacle, Erosion, EstimationSettings, Scenario, SensorParams};

use crate::CliError;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub format_version: u32,
    #[serde(default = "defaults::seed")]
    pub seed: u64,
    #[serde(default = "defaults::max_steps")]
    pub max_steps: usize,
    #[serde(default = "defaults::goal_tolerance")]
    pub goal_tolerance: f64,
    pub goal: [f64; 3],
    pub agent: AgentSection,
    #[serde(default)]
    pub sensor: SensorSection,
    #[serde(default)]
    pub estimation: EstimationSection,
    #[serde(default)]
    pub planner: PlannerSection,
    #[serde(default)]
    pub dynamics: DynamicsSection,
    #[serde(default)]
    pub obstacles: Vec<ObstacleSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentSection {
    pub position: [f64; 3],
    #[serde(default)]
    pub heading: f64,
    #[serde(default)]
    pub velocity: [f64; 3],
    #[serde(default)]
    pub heading_rate: f64,
    #[serde(default = "defaults::agent_radius")]
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SensorSection {
    pub rays: usize,
    pub max_range: f64,
    pub noise_std: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ErosionKind {
    Radial,
    Ball,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimationSection {
    pub max_order: usize,
    pub soft_directions: usize,
    pub weight_cap_factor: f64,
    pub tol: f64,
    pub max_iter: usize,
    pub erosion: ErosionKind,
    pub buffer: f64,
    pub approach: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlannerSection {
    pub horizon: usize,
    /// Row-major 3 × 3 position-error weight.
    pub position_weight: [[f64; 3]; 3],
    /// Row-major 4 × 4 input weight over `(u_vx, u_vy, u_vz, u_ψ)`.
    pub input_weight: [[f64; 4]; 4],
    pub velocity_min: [f64; 3],
    pub velocity_max: [f64; 3],
    pub heading_rate_min: f64,
    pub heading_rate_max: f64,
    pub input_velocity_min: [f64; 3],
    pub input_velocity_max: [f64; 3],
    pub input_heading_rate_min: f64,
    pub input_heading_rate_max: f64,
    pub collision_tol: f64,
    pub clearance_samples: usize,
    pub max_iter: usize,
    pub convergence_tol: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DynamicsSection {
    pub tau: f64,
    pub gain: f64,
    pub tau_heading: f64,
    pub gain_heading: f64,
    pub dt: f64,
    /// Derived from the time constants when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub substeps: Option<usize>,
    pub noise: NoiseSection,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSection {
    pub position: f64,
    pub heading: f64,
    pub velocity: f64,
    pub heading_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObstacleSection {
    pub center: [f64; 3],
    pub half_extents: [f64; 3],
}

mod defaults {
    use super::*;

    pub(super) fn stock() -> Scenario {
        Scenario::with_defaults(Vector3::zeros(), Vector3::zeros(), vec![])
    }

    pub fn seed() -> u64 {
        stock().seed
    }

    pub fn max_steps() -> usize {
        stock().max_steps
    }

    pub fn goal_tolerance() -> f64 {
        stock().goal_tolerance
    }

    pub fn agent_radius() -> f64 {
        stock().agent_radius
    }
}

impl Default for SensorSection {
    fn default() -> Self {
        ScenarioFile::from_scenario(&defaults::stock()).sensor
    }
}

impl Default for EstimationSection {
    fn default() -> Self {
        ScenarioFile::from_scenario(&defaults::stock()).estimation
    }
}

impl Default for PlannerSection {
    fn default() -> Self {
        ScenarioFile::from_scenario(&defaults::stock()).planner
    }
}

impl Default for DynamicsSection {
    fn default() -> Self {
        let mut d = ScenarioFile::from_scenario(&defaults::stock()).dynamics;
        d.substeps = None;
        d
    }
}

fn v3(a: [f64; 3]) -> Vector3<f64> {
    Vector3::from(a)
}

fn a3(v: &Vector3<f64>) -> [f64; 3] {
    [v.x, v.y, v.z]
}

impl ScenarioFile {
    /// The file form of `s`. Converting back with [`Self::to_scenario`]
    /// gives `s` again.
    pub fn from_scenario(s: &Scenario) -> Self {
        let b = &s.planner.bounds;
        let d = &s.dynamics;
        Self {
            format_version: FORMAT_VERSION,
            seed: s.seed,
            max_steps: s.max_steps,
            goal_tolerance: s.goal_tolerance,
            goal: a3(&s.goal),
            agent: AgentSection {
                position: a3(&s.start.p),
                heading: s.start.psi,
                velocity: a3(&s.start.v),
                heading_rate: s.start.psi_dot,
                radius: s.agent_radius,
            },
            sensor: SensorSection {
                rays: s.sensor.rays,
                max_range: s.sensor.max_range,
                noise_std: s.sensor.noise_std,
            },
            estimation: EstimationSection {
                max_order: s.estimation.max_order,
                soft_directions: s.estimation.soft_directions,
                weight_cap_factor: s.estimation.weight_cap_factor,
                tol: s.estimation.tol,
                max_iter: s.estimation.max_iter,
                erosion: match s.estimation.erosion {
                    Erosion::Radial => ErosionKind::Radial,
                    Erosion::Ball => ErosionKind::Ball,
                },
                buffer: s.estimation.buffer,
                approach: s.estimation.approach,
            },
            planner: PlannerSection {
                horizon: s.planner.horizon,
                position_weight: std::array::from_fn(|i| {
                    std::array::from_fn(|j| s.planner.p[(i, j)])
                }),
                input_weight: std::array::from_fn(|i| std::array::from_fn(|j| s.planner.q[(i, j)])),
                velocity_min: a3(&b.velocity_min),
                velocity_max: a3(&b.velocity_max),
                heading_rate_min: b.heading_rate_min,
                heading_rate_max: b.heading_rate_max,
                input_velocity_min: a3(&b.input_velocity_min),
                input_velocity_max: a3(&b.input_velocity_max),
                input_heading_rate_min: b.input_heading_rate_min,
                input_heading_rate_max: b.input_heading_rate_max,
                collision_tol: s.planner.collision_tol,
                clearance_samples: s.planner.clearance_samples,
                max_iter: s.planner.max_iter,
                convergence_tol: s.planner.convergence_tol,
            },
            dynamics: DynamicsSection {
                tau: d.tau,
                gain: d.gain,
                tau_heading: d.tau_heading,
                gain_heading: d.gain_heading,
                dt: d.dt,
                substeps: Some(d.substeps),
                noise: NoiseSection {
                    position: d.noise.position,
                    heading: d.noise.heading,
                    velocity: d.noise.velocity,
                    heading_rate: d.noise.heading_rate,
                },
            },
            obstacles: s
                .obstacles
                .iter()
                .map(|o| ObstacleSection {
                    center: a3(&o.center),
                    half_extents: a3(&o.half_extents),
                })
                .collect(),
        }
    }

    /// Builds and validates the scenario.
    pub fn to_scenario(&self) -> Result<Scenario, CliError> {
        if self.format_version != FORMAT_VERSION {
            return Err(CliError::invalid(
                "format_version",
                format!(
                    "unsupported version {} (expected {FORMAT_VERSION})",
                    self.format_version
                ),
            ));
        }
        let p = &self.planner;
        let bounds = Bounds {
            velocity_min: v3(p.velocity_min),
            velocity_max: v3(p.velocity_max),
            heading_rate_min: p.heading_rate_min,
            heading_rate_max: p.heading_rate_max,
            input_velocity_min: v3(p.input_velocity_min),
            input_velocity_max: v3(p.input_velocity_max),
            input_heading_rate_min: p.input_heading_rate_min,
            input_heading_rate_max: p.input_heading_rate_max,
        };
        let planner = PlannerParams {
            horizon: p.horizon,
            p: Matrix3::from_fn(|i, j| p.position_weight[i][j]),
            q: Matrix4::from_fn(|i, j| p.input_weight[i][j]),
            bounds,
            collision_tol: p.collision_tol,
            clearance_samples: p.clearance_samples,
            max_iter: p.max_iter,
            convergence_tol: p.convergence_tol,
        };
        let d = &self.dynamics;
        let mut dynamics = DynamicsParams::new(d.tau, d.gain, d.tau_heading, d.gain_heading, d.dt);
        if let Some(n) = d.substeps {
            if n == 0 {
                return Err(CliError::invalid("dynamics.substeps", "must be at least 1"));
            }
            dynamics.substeps = n;
        }
        dynamics.noise = ProcessNoise {
            position: d.noise.position,
            heading: d.noise.heading,
            velocity: d.noise.velocity,
            heading_rate: d.noise.heading_rate,
        };
        let mut obstacles = Vec::with_capacity(self.obstacles.len());
        for (i, o) in self.obstacles.iter().enumerate() {
            let b = BoxObstacle::new(v3(o.center), v3(o.half_extents))
                .map_err(|e| CliError::invalid(format!("obstacles[{i}].{}", e.field), e.reason))?;
            obstacles.push(b);
        }
        let e = &self.estimation;
        let a = &self.agent;
        if !(0.0..1.0).contains(&e.approach) {
            return Err(CliError::invalid(
                "estimation.approach",
                "must lie in [0, 1)",
            ));
        }
        if !(e.buffer >= 0.0 && e.buffer.is_finite()) {
            return Err(CliError::invalid(
                "estimation.buffer",
                "must be non-negative and finite",
            ));
        }
        let scenario = Scenario {
            start: AgentState {
                p: v3(a.position),
                psi: a.heading,
                v: v3(a.velocity),
                psi_dot: a.heading_rate,
            },
            goal: v3(self.goal),
            agent_radius: a.radius,
            obstacles,
            sensor: SensorParams {
                rays: self.sensor.rays,
                max_range: self.sensor.max_range,
                noise_std: self.sensor.noise_std,
            },
            estimation: EstimationSettings {
                max_order: e.max_order,
                soft_directions: e.soft_directions,
                weight_cap_factor: e.weight_cap_factor,
                tol: e.tol,
                max_iter: e.max_iter,
                erosion: match e.erosion {
                    ErosionKind::Radial => Erosion::Radial,
                    ErosionKind::Ball => Erosion::Ball,
                },
                buffer: e.buffer,
                approach: e.approach,
            },
            planner,
            dynamics,
            max_steps: self.max_steps,
            goal_tolerance: self.goal_tolerance,
            seed: self.seed,
        };
        scenario
            .validate()
            .map_err(|e| CliError::invalid(e.field, e.reason))?;
        Ok(scenario)
    }

    pub fn from_toml(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("scenario files always serialize")
    }
}

/// Reads, parses and validates a scenario file.
pub fn parse_scenario(path: &Path) -> Result<Scenario, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let file = ScenarioFile::from_toml(&text).map_err(|e| CliError::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    file.to_scenario()
}
