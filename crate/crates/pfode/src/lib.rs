//! Probability-flow sampling of Gaussian-mixture targets, end to end.
//!
//! The library integrates the deterministic reverse-time ODE associated with
//! a Gaussian noising process, turning draws from an isotropic Gaussian into
//! draws from a chosen mixture target. Because mixture targets keep their
//! noised marginals, scores, and moments in closed form, every run can be
//! scored against exact ground truth — which makes this a workbench for
//! studying how integrator order, step size, and controlled score error
//! trade off against sampling accuracy.
//!
//! The pieces:
//!
//! * [`schedule`] — noise schedules `λ, σ` with closed-form integrals, the
//!   reverse-time quantities `ζ, α`, and the `φ` weight functions.
//! * [`target`] — validated Gaussian mixtures, exact densities/scores/
//!   moments at any time, controlled score perturbations, exact sampling.
//! * [`solver`] — standard and exponential Runge-Kutta steppers on an
//!   aligned time grid, for single states or parallel ensembles.
//! * [`metrics`] — KDE/total-variation and moment error metrics plus
//!   empirical-order fits, all thread-count deterministic.
//! * [`harness`] — JSON-configured experiment runner with CSV/manifest
//!   output, convergence and score-robustness studies.
//!
//! # Quick start
//!
//! ```
//! use pfode::schedule::VarianceSchedule;
//! use pfode::solver::{ButcherTableau, Integrator, Scheme, TimeGrid};
//! use pfode::target::{GaussianComponent, GaussianMixture, ScoreField};
//!
//! let schedule = VarianceSchedule::constant_ou(16.0)?;
//! let target = GaussianMixture::new(
//!     1,
//!     vec![
//!         GaussianComponent { weight: 0.5, mean: vec![-2.0], cov: vec![0.25] },
//!         GaussianComponent { weight: 0.5, mean: vec![2.0], cov: vec![0.25] },
//!     ],
//! )?;
//! let field = ScoreField::new(target, schedule, 0.0)?;
//! let integrator = Integrator::new(Scheme::Standard(ButcherTableau::rk4()));
//! let grid = TimeGrid::new(&schedule, 0.0, 512, 64, integrator.scheme(), true)?;
//!
//! // Push one standard-normal draw through the flow.
//! let y = pfode::solver::solve_particle(&integrator, &schedule, &field, &grid, &[0.17])?;
//! assert!(y[0].is_finite());
//! # Ok::<(), pfode::error::Error>(())
//! ```

pub mod error;
pub mod harness;
pub mod linalg;
pub mod metrics;
pub mod schedule;
pub mod solver;
pub mod target;

pub use error::{Error, Result};
