//! Run artifacts: the trajectory table, per-step weights, optional surface
//! dumps and a JSON summary.
//!
//! Every CSV file starts with a `# <kind> format_version=<n>` line followed by
//! a header row. Units are in the column names.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use serde::Serialize;
use shplan::sh_basis::RealShExpansion;
use shplan::sim::{Outcome, Scenario, TrajectoryLog};

use crate::{exit_code, CliError};

pub const FORMAT_VERSION: u32 = 1;

pub const TRAJECTORY_HEADER: &str =
    "step,time_s,x_m,y_m,z_m,heading_rad,vx_mps,vy_mps,vz_mps,heading_rate_radps,\
u_vx_mps,u_vy_mps,u_vz_mps,u_heading_rate_radps,min_clearance_m,points,feasible,plan_iterations,\
scan_ms,preprocess_ms,estimate_ms,plan_ms";

pub const SURFACE_HEADER: &str = "theta_rad,phi_rad,r_m,x_m,y_m,z_m";

/// Polar and azimuthal resolution of the surface dumps.
const SURFACE_GRID: (usize, usize) = (37, 72);

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Percentiles {
    pub p50: f64,
    pub p90: f64,
    pub max: f64,
}

impl Percentiles {
    /// Nearest-rank percentiles; zeros for an empty sample.
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self {
                p50: 0.0,
                p90: 0.0,
                max: 0.0,
            };
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let rank = |q: f64| v[((q * v.len() as f64).ceil() as usize).clamp(1, v.len()) - 1];
        Self {
            p50: rank(0.5),
            p90: rank(0.9),
            max: v[v.len() - 1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Timing {
    pub scan_ms: Percentiles,
    pub preprocess_ms: Percentiles,
    pub estimate_ms: Percentiles,
    pub plan_ms: Percentiles,
    /// Estimate plus plan.
    pub step_ms: Percentiles,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub format_version: u32,
    pub outcome: String,
    pub exit_code: i32,
    pub steps: usize,
    pub path_length_m: f64,
    /// `null` when the world has no obstacles.
    pub min_clearance_m: Option<f64>,
    pub all_feasible: bool,
    pub final_position_m: [f64; 3],
    pub goal_distance_m: f64,
    /// Planner iterations of the first (cold) step.
    pub cold_plan_iterations: Option<usize>,
    /// Median planner iterations over the warm-started steps.
    pub median_warm_plan_iterations: Option<f64>,
    pub timing: Timing,
}

pub fn outcome_name(o: Outcome) -> &'static str {
    match o {
        Outcome::ReachedGoal => "reached_goal",
        Outcome::Timeout => "timeout",
        Outcome::Collision => "collision",
        Outcome::PlannerFailure => "planner_failure",
    }
}

fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    })
}

pub fn summarize(scenario: &Scenario, log: &TrajectoryLog) -> Summary {
    let ms = |f: fn(&shplan::sim::PhaseTimes) -> f64| -> Vec<f64> {
        log.records.iter().map(|r| f(&r.times) * 1e3).collect()
    };
    let plans: Vec<_> = log.records.iter().filter_map(|r| r.plan.as_ref()).collect();
    let cold = plans.iter().find(|p| !p.warm_started).map(|p| p.iterations);
    let mut warm: Vec<f64> = plans
        .iter()
        .filter(|p| p.warm_started)
        .map(|p| p.iterations as f64)
        .collect();
    let min = log.min_clearance();
    Summary {
        format_version: FORMAT_VERSION,
        outcome: outcome_name(log.outcome).into(),
        exit_code: exit_code(log.outcome),
        steps: log.records.len(),
        path_length_m: log.path_length(),
        min_clearance_m: min.is_finite().then_some(min),
        all_feasible: log.all_feasible(),
        final_position_m: [
            log.final_state.p.x,
            log.final_state.p.y,
            log.final_state.p.z,
        ],
        goal_distance_m: (log.final_state.p - scenario.goal).norm(),
        cold_plan_iterations: cold,
        median_warm_plan_iterations: median(&mut warm),
        timing: Timing {
            scan_ms: Percentiles::of(&ms(|t| t.scan)),
            preprocess_ms: Percentiles::of(&ms(|t| t.preprocess)),
            estimate_ms: Percentiles::of(&ms(|t| t.estimate)),
            plan_ms: Percentiles::of(&ms(|t| t.plan)),
            step_ms: Percentiles::of(&ms(|t| t.estimate + t.plan)),
        },
    }
}

struct Csv {
    path: PathBuf,
    out: BufWriter<File>,
}

impl Csv {
    fn create(path: PathBuf, kind: &str, header: &str) -> Result<Self, CliError> {
        let file = File::create(&path).map_err(|source| CliError::Io {
            path: path.clone(),
            source,
        })?;
        let mut csv = Self {
            path,
            out: BufWriter::new(file),
        };
        csv.line(&format!("# {kind} format_version={FORMAT_VERSION}"))?;
        csv.line(header)?;
        Ok(csv)
    }

    fn line(&mut self, s: &str) -> Result<(), CliError> {
        writeln!(self.out, "{s}").map_err(|source| CliError::Io {
            path: self.path.clone(),
            source,
        })
    }

    fn finish(mut self) -> Result<(), CliError> {
        self.out.flush().map_err(|source| CliError::Io {
            path: self.path,
            source,
        })
    }
}

fn join(values: impl IntoIterator<Item = String>) -> String {
    values.into_iter().collect::<Vec<_>>().join(",")
}

/// Writes `trajectory.csv`, `weights.csv`, `summary.json` and, when
/// `surfaces` is set, `surfaces/step_XXXX.csv` into `dir`, which must exist.
pub fn write_artifacts(
    dir: &Path,
    scenario: &Scenario,
    log: &TrajectoryLog,
    surfaces: bool,
) -> Result<Summary, CliError> {
    let mut traj = Csv::create(dir.join("trajectory.csv"), "trajectory", TRAJECTORY_HEADER)?;
    for r in &log.records {
        let (s, u, t) = (&r.state, &r.input, &r.times);
        let clearance = if r.min_clearance.is_finite() {
            r.min_clearance.to_string()
        } else {
            String::new()
        };
        let numbers = [
            r.step as f64,
            r.time,
            s.p.x,
            s.p.y,
            s.p.z,
            s.psi,
            s.v.x,
            s.v.y,
            s.v.z,
            s.psi_dot,
            u.u_v.x,
            u.u_v.y,
            u.u_v.z,
            u.u_psi,
        ];
        let mut cells: Vec<String> = numbers.iter().map(|v| v.to_string()).collect();
        cells.extend([
            clearance,
            r.points.to_string(),
            u8::from(r.feasible).to_string(),
            r.plan.as_ref().map_or(0, |p| p.iterations).to_string(),
        ]);
        cells.extend(
            [t.scan, t.preprocess, t.estimate, t.plan]
                .iter()
                .map(|v| (v * 1e3).to_string()),
        );
        traj.line(&join(cells))?;
    }
    traj.finish()?;

    let k = shplan::sh_basis::coefficient_count(scenario.estimation.max_order);
    let header = join(std::iter::once("step".to_string()).chain((0..k).map(|j| format!("w{j}_m"))));
    let mut weights = Csv::create(dir.join("weights.csv"), "weights", &header)?;
    for r in log.records.iter().filter(|r| r.weights.len() == k) {
        weights.line(&join(
            std::iter::once(r.step.to_string()).chain(r.weights.iter().map(|w| w.to_string())),
        ))?;
    }
    weights.finish()?;

    if surfaces {
        let sub = dir.join("surfaces");
        fs::create_dir_all(&sub).map_err(|source| CliError::Io {
            path: sub.clone(),
            source,
        })?;
        for r in log.records.iter().filter(|r| r.weights.len() == k) {
            let e =
                RealShExpansion::new(scenario.estimation.max_order, r.weights.clone(), r.state.p)
                    .expect("logged weights have the expansion length");
            write_surface(&sub.join(format!("step_{:04}.csv", r.step)), &e)?;
        }
    }

    let summary = summarize(scenario, log);
    let path = dir.join("summary.json");
    let text = serde_json::to_string_pretty(&summary).expect("summary serializes");
    fs::write(&path, text + "\n").map_err(|source| CliError::Io { path, source })?;
    Ok(summary)
}

fn write_surface(path: &Path, e: &RealShExpansion) -> Result<(), CliError> {
    let mut csv = Csv::create(path.to_path_buf(), "surface", SURFACE_HEADER)?;
    let (nt, np) = SURFACE_GRID;
    for i in 0..nt {
        let theta = std::f64::consts::PI * i as f64 / (nt - 1) as f64;
        for j in 0..np {
            let phi = std::f64::consts::TAU * j as f64 / np as f64;
            let r = e.eval_radius(theta, phi).expect("grid angles are in range");
            let (st, ct) = theta.sin_cos();
            let (sp, cp) = phi.sin_cos();
            let p = e.center() + Vector3::new(st * cp, st * sp, ct) * r;
            csv.line(&join([theta, phi, r, p.x, p.y, p.z].map(|v| v.to_string())))?;
        }
    }
    csv.finish()
}
