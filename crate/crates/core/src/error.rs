use thiserror::Error;

/// Argument outside the domain of a basis or geometry function.
#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum DomainError {
    #[error("|m| = {m} exceeds order l = {l}")]
    Index { l: usize, m: i64 },
    #[error("Legendre argument {0} outside [-1, 1]")]
    Argument(f64),
    #[error("polar angle {0} outside [0, π]")]
    Theta(f64),
    #[error("azimuth {0} outside [0, 2π)")]
    Phi(f64),
    #[error("expected {expected} weights for the maximum order, got {got}")]
    WeightCount { expected: usize, got: usize },
    #[error("weight {index} is not finite")]
    NonFiniteWeight { index: usize },
    #[error("direction list is empty")]
    NoDirections,
}
