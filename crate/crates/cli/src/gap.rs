//! Gap needed to pass between two obstacles: ellipsoid bounding versus a
//! free-space field that hugs the obstacle faces.

use std::path::Path;

use shplan::sim::{required_gap, Dims};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GapRow {
    pub width: f64,
    pub ellipsoid_2d: f64,
    pub ellipsoid_3d: f64,
    /// `2 r_a + margin`, whatever the obstacle width.
    pub spherical_harmonic: f64,
}

pub fn gap_table(agent_radius: f64, widths: &[f64], margin: f64) -> Vec<GapRow> {
    widths
        .iter()
        .map(|&w| GapRow {
            width: w,
            ellipsoid_2d: required_gap(agent_radius, w, Dims::Two),
            ellipsoid_3d: required_gap(agent_radius, w, Dims::Three),
            spherical_harmonic: 2.0 * agent_radius + margin,
        })
        .collect()
}

pub const GAP_HEADER: &str = "obstacle_width_m,ellipsoid_2d_m,ellipsoid_3d_m,spherical_harmonic_m";

pub fn render_gap_table(rows: &[GapRow]) -> String {
    let mut s = format!(
        "# gap-report format_version={}\n{GAP_HEADER}\n",
        crate::output::FORMAT_VERSION
    );
    for r in rows {
        s += &format!(
            "{},{:.6},{:.6},{:.6}\n",
            r.width, r.ellipsoid_2d, r.ellipsoid_3d, r.spherical_harmonic
        );
    }
    s
}

/// Writes the table to `out`. Returns the exit code.
pub fn report_gap_comparison(
    agent_radius: f64,
    widths: &[f64],
    margin: f64,
    out: &Path,
) -> Result<i32, CliError> {
    if !(agent_radius > 0.0 && agent_radius.is_finite()) {
        return Err(CliError::invalid("agent_radius", "must be positive"));
    }
    if let Some(w) = widths.iter().find(|w| !(**w >= 0.0 && w.is_finite())) {
        return Err(CliError::invalid(
            "widths",
            format!("{w} is not a non-negative width"),
        ));
    }
    if !(margin >= 0.0 && margin.is_finite()) {
        return Err(CliError::invalid("margin", "must be non-negative"));
    }
    let text = render_gap_table(&gap_table(agent_radius, widths, margin));
    std::fs::write(out, text).map_err(|source| CliError::Io {
        path: out.to_path_buf(),
        source,
    })?;
    Ok(0)
}
