//! Local motion planning inside a star-convex free-space estimate.
//!
//! Each control step the agent scans its surroundings, fits a real
//! spherical-harmonic radius field `r(θ, φ)` that stays inside the measured
//! free space ([`freespace`]), and plans a short receding-horizon trajectory
//! whose waypoints must remain inside that field ([`planner`]). The [`sim`]
//! module closes the loop against a world of axis-aligned boxes.

pub mod error;
pub mod freespace;
pub mod geometry;
pub mod planner;
pub mod qp;
pub mod sh_basis;
pub mod sim;

pub use error::DomainError;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/basis.md")]
    mod basis {}
    #[doc = include_str!("../../../book/src/freespace.md")]
    mod freespace {}
    #[doc = include_str!("../../../book/src/planner.md")]
    mod planner {}
    #[doc = include_str!("../../../book/src/simulation.md")]
    mod simulation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
