use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use shplan_cli::{config, gap, run_command, CliError, RunOptions};

#[derive(Parser)]
#[command(
    name = "shplan",
    version,
    about = "Spherical-harmonic free-space planner simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario in closed loop and write trajectory, weights and summary files.
    Run {
        scenario: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Create the output directory if it does not exist.
        #[arg(long)]
        create: bool,
        /// Also write the fitted surface of every step under `surfaces/`.
        #[arg(long)]
        surface_dumps: bool,
        /// Override the scenario seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Tabulate the gap two obstacles must leave for ellipsoid bounding and
    /// for the spherical-harmonic planner.
    GapReport {
        #[arg(long)]
        agent_radius: f64,
        /// Comma-separated obstacle widths in meters.
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,4")]
        widths: Vec<f64>,
        /// Clearance the spherical-harmonic planner keeps on top of 2 r_a.
        #[arg(long, default_value_t = 0.0)]
        margin: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Parse and validate a scenario file.
    Validate { scenario: PathBuf },
}

fn fail(e: CliError) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(e.exit_code() as u8)
}

fn main() -> ExitCode {
    match Cli::parse().command {
        Command::Run {
            scenario,
            out,
            create,
            surface_dumps,
            seed,
        } => {
            let opts = RunOptions {
                out,
                create,
                surface_dumps,
                seed,
            };
            match run_command(&scenario, &opts) {
                Ok(s) => {
                    println!(
                        "{}: {} steps, path {:.2} m, min clearance {}, median step {:.1} ms",
                        s.outcome,
                        s.steps,
                        s.path_length_m,
                        s.min_clearance_m
                            .map_or("n/a".to_string(), |c| format!("{c:.3} m")),
                        s.timing.step_ms.p50,
                    );
                    ExitCode::from(s.exit_code as u8)
                }
                Err(e) => fail(e),
            }
        }
        Command::GapReport {
            agent_radius,
            widths,
            margin,
            out,
        } => match gap::report_gap_comparison(agent_radius, &widths, margin, &out) {
            Ok(code) => {
                print!(
                    "{}",
                    gap::render_gap_table(&gap::gap_table(agent_radius, &widths, margin))
                );
                ExitCode::from(code as u8)
            }
            Err(e) => fail(e),
        },
        Command::Validate { scenario } => match config::parse_scenario(&scenario) {
            Ok(s) => {
                println!(
                    "ok: {} obstacles, horizon {} x {} s, order {}, {} rays",
                    s.obstacles.len(),
                    s.planner.horizon,
                    s.dynamics.dt,
                    s.estimation.max_order,
                    s.sensor.rays,
                );
                ExitCode::SUCCESS
            }
            Err(e) => fail(e),
        },
    }
}
