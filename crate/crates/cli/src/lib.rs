//! Command-line front end: scenario files, closed-loop runs with CSV/JSON
//! output, and the gap comparison table.
//!
//! Exit codes:
//!
//! | code | meaning |
//! |------|---------|
//! | 0 | goal reached (or command succeeded) |
//! | 2 | bad command line |
//! | 3 | timeout |
//! | 4 | collision |
//! | 5 | planner failure |
//! | 6 | invalid or unreadable scenario |
//! | 7 | I/O error |

use std::path::{Path, PathBuf};

use shplan::sim::{run_closed_loop, Outcome};
use thiserror::Error;

pub mod config;
pub mod gap;
pub mod output;

pub use config::{parse_scenario, ScenarioFile};
pub use gap::report_gap_comparison;

pub const EXIT_TIMEOUT: i32 = 3;
pub const EXIT_COLLISION: i32 = 4;
pub const EXIT_PLANNER_FAILURE: i32 = 5;
pub const EXIT_CONFIG: i32 = 6;
pub const EXIT_IO: i32 = 7;

pub fn exit_code(outcome: Outcome) -> i32 {
    match outcome {
        Outcome::ReachedGoal => 0,
        Outcome::Timeout => EXIT_TIMEOUT,
        Outcome::Collision => EXIT_COLLISION,
        Outcome::PlannerFailure => EXIT_PLANNER_FAILURE,
    }
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{}: {message}", path.display())]
    Parse { path: PathBuf, message: String },
    #[error("invalid scenario: {field}: {reason}")]
    Invalid { field: String, reason: String },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn invalid(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Self::Invalid {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Parse { .. } | Self::Invalid { .. } => EXIT_CONFIG,
            Self::Io { .. } => EXIT_IO,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out: PathBuf,
    /// Create `out` if it is missing.
    pub create: bool,
    pub surface_dumps: bool,
    pub seed: Option<u64>,
}

/// Runs a scenario file and writes the artifacts. Returns the summary with
/// the exit code for the outcome.
pub fn run_command(scenario: &Path, opts: &RunOptions) -> Result<output::Summary, CliError> {
    let mut s = parse_scenario(scenario)?;
    if let Some(seed) = opts.seed {
        s.seed = seed;
    }
    if !opts.out.is_dir() {
        if opts.create {
            std::fs::create_dir_all(&opts.out).map_err(|source| CliError::Io {
                path: opts.out.clone(),
                source,
            })?;
        } else {
            return Err(CliError::Io {
                path: opts.out.clone(),
                source: std::io::Error::new(
                    std::io::ErrorKind::NotFound,
                    "output directory does not exist (pass --create)",
                ),
            });
        }
    }
    let log = run_closed_loop(&s).map_err(|e| CliError::invalid(e.field, e.reason))?;
    output::write_artifacts(&opts.out, &s, &log, opts.surface_dumps)
}
