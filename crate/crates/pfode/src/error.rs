//! Crate-wide error type.
//!
//! Every fallible operation returns [`Error`]. Variants are grouped by the
//! stage that can produce them: domain/validation problems when constructing
//! schedules, targets, grids and configs; numerical problems (singular times,
//! degenerate coefficients, diverged trajectories) during a run; and I/O.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument fell outside its mathematical domain (negative horizon,
    /// time outside `[0, T]`, non-positive bandwidth, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// A quantity is undefined at the requested time, e.g. `alpha` at a
    /// reverse time where the noise scale vanishes.
    #[error("singular at requested time: {0}")]
    Singular(String),

    /// A mixture or sample set failed validation (weights, symmetry,
    /// positive-definiteness, degenerate spread, ...).
    #[error("invalid target: {0}")]
    InvalidTarget(String),

    /// Integrator coefficients are undefined for the requested nodes/step.
    #[error("degenerate integrator coefficients: {0}")]
    DegenerateCoefficients(String),

    /// A run configuration failed validation.
    #[error("config error: {0}")]
    Config(String),

    /// Stage times do not land on the score-evaluation grid.
    #[error("grid alignment error: {0}")]
    Misaligned(String),

    /// A trajectory left the finite range.
    #[error("diverged at step {step}, stage {stage}")]
    Diverged { step: usize, stage: usize },

    /// Too many trajectories diverged for the ensemble statistics to be
    /// meaningful (more than the configured fraction).
    #[error("run failed: {n_diverged} of {n_total} trajectories diverged (first at step {first_step}, stage {first_stage})")]
    RunFailed {
        n_diverged: usize,
        n_total: usize,
        first_step: usize,
        first_stage: usize,
    },

    /// Not enough usable data points for a fit or estimate.
    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("config parse error: {0}")]
    Parse(#[from] serde_json::Error),
}
