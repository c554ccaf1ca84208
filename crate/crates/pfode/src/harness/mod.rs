//! Experiment orchestration: seeded ensembles, single runs, sweeps, CSV.
//!
//! An [`Experiment`] is a fully validated config — schedule and target
//! built, every (scheme, step-count) pair alignment-checked — plus the
//! machinery to execute it. A run integrates one ensemble and reduces it to
//! an error report; studies string runs together and fit convergence
//! slopes.
//!
//! Everything downstream of `(config, seed)` is deterministic, including
//! across thread counts; the only nondeterministic output is the wall-clock
//! `runtime_s` column of the CSV. Sweeps reuse the same initial ensemble
//! (common random numbers), which makes error ratios between neighbouring
//! runs far less noisy than independent sampling would.

pub mod config;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::metrics::{
    self, default_noise_floor, ensemble_cov, ensemble_mean, fit_order, kde_on_grid,
    rel_cov_error, rel_mean_error, tv_error,
};
use crate::schedule::VarianceSchedule;
use crate::solver::{solve_ensemble, Integrator, Scheme, TimeGrid};
use crate::target::{GaussianMixture, ScoreField};

pub use config::{
    ComponentConfig, ExperimentConfig, GridConfig, KdeConfig, ScheduleConfig, ScoreErrorConfig,
    TargetConfig, SCHEMA_VERSION,
};

/// Rows per sampling shard. Each shard draws from its own substream, so the
/// ensemble is reproducible piecewise and independent of thread count.
pub const SAMPLE_SHARD_ROWS: usize = 8192;

/// A run is declared failed when more than 1 in [`DIVERGENCE_DENOMINATOR`]
/// trajectories diverge.
pub const DIVERGENCE_DENOMINATOR: usize = 1000;

/// Seed of sampling shard `s`: the `s`-th output of a splitmix64 generator
/// seeded with the master seed. Spelled out so an ensemble can be
/// regenerated outside this crate: with wrapping arithmetic,
///
/// ```text
/// z = master + (s + 1) · 0x9E3779B97F4A7C15
/// z = (z ⊕ z≫30) · 0xBF58476D1CE4E5B9
/// z = (z ⊕ z≫27) · 0x94D049BB133111EB
/// shard_seed = z ⊕ z≫31
/// ```
///
/// and shard `s` fills rows `[s·8192, (s+1)·8192)` from
/// `ChaCha8Rng::seed_from_u64(shard_seed)`, coordinates in row-major order.
pub fn shard_seed(master: u64, shard: u64) -> u64 {
    let mut z = master.wrapping_add(shard.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Draws `n` i.i.d. standard normal vectors of dimension `dim` (flat,
/// row-major). Bit-identical for a given seed regardless of thread count,
/// and prefix-stable: the first `m` rows match a call with `n = m`.
pub fn sample_standard_normal(seed: u64, n: usize, dim: usize) -> Vec<f64> {
    assert!(dim > 0, "dimension must be positive");
    let mut out = vec![0.0f64; n * dim];
    out.par_chunks_mut(SAMPLE_SHARD_ROWS * dim)
        .enumerate()
        .for_each(|(s, chunk)| {
            let mut rng = ChaCha8Rng::seed_from_u64(shard_seed(seed, s as u64));
            for v in chunk.iter_mut() {
                *v = StandardNormal.sample(&mut rng);
            }
        });
    out
}

/// One executed run — one CSV data row.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub scheme: &'static str,
    pub dim: usize,
    pub n_steps: usize,
    /// Solver step size `H = (horizon - tau) / n_steps`.
    pub h: f64,
    pub eps_score: f64,
    pub n_particles: usize,
    pub tv_error: f64,
    pub rel_mean_error: f64,
    pub rel_cov_error: f64,
    pub runtime_s: f64,
    pub seed: u64,
}

/// Fitted slope for one scheme across a sweep — one CSV summary row.
#[derive(Debug, Clone, PartialEq)]
pub struct SchemeSummary {
    pub scheme: &'static str,
    pub dim: usize,
    pub n_particles: usize,
    /// Least-squares slope of `ln rel_mean_error` against the sweep
    /// variable (`ln H` for convergence, `ln eps` for score-error).
    pub fitted_order: f64,
    pub seed: u64,
}

/// Output of a study: data rows in execution order, then per-scheme slopes.
#[derive(Debug, Clone, Default)]
pub struct StudyResult {
    pub runs: Vec<RunRecord>,
    pub summaries: Vec<SchemeSummary>,
}

/// Which subcommand semantics a config is being used under.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StudyKind {
    Run,
    Convergence,
    ScoreError,
}

/// A validated, executable experiment.
#[derive(Debug)]
pub struct Experiment {
    config: ExperimentConfig,
    schedule: VarianceSchedule,
    mixture: GaussianMixture,
    schemes: Vec<Scheme>,
}

impl Experiment {
    /// Validates the config end to end: schedule and target constructible,
    /// scheme names resolvable, and — under strict alignment — every
    /// (scheme, n_steps) pair's stage times on the lattice. Nothing is
    /// integrated yet.
    pub fn from_config(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let schedule = config.schedule.build()?;
        let mixture = config.target.build()?;
        let schemes =
            config.schemes.iter().map(|name| config.parse_scheme(name)).collect::<Result<Vec<_>>>()?;
        for scheme in &schemes {
            for &n in &config.grid.n_steps {
                TimeGrid::new(
                    &schedule,
                    config.grid.tau,
                    config.grid.n_base,
                    n,
                    scheme,
                    config.grid.strict_alignment,
                )?;
            }
        }
        Ok(Self { config, schedule, mixture, schemes })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn schedule(&self) -> &VarianceSchedule {
        &self.schedule
    }

    pub fn mixture(&self) -> &GaussianMixture {
        &self.mixture
    }

    /// Checks the constraints that only a specific subcommand imposes
    /// (sweep shape, number of step counts).
    pub fn check_compatible(&self, kind: StudyKind) -> Result<()> {
        match kind {
            StudyKind::Run => Ok(()),
            StudyKind::Convergence => {
                if matches!(self.config.score_error, ScoreErrorConfig::Sweep { .. }) {
                    return Err(Error::Config(
                        "a convergence study needs score_error mode \"fixed\" or \
                         \"order_matched\", not \"sweep\""
                            .into(),
                    ));
                }
                if self.config.grid.n_steps.len() < 3 {
                    return Err(Error::Config(format!(
                        "a convergence study needs at least 3 step counts, got {}",
                        self.config.grid.n_steps.len()
                    )));
                }
                Ok(())
            }
            StudyKind::ScoreError => {
                let n_values = match &self.config.score_error {
                    ScoreErrorConfig::Sweep { values } => values.len(),
                    _ => {
                        return Err(Error::Config(
                            "a score-error study needs score_error mode \"sweep\"".into(),
                        ))
                    }
                };
                if n_values < 3 {
                    return Err(Error::Config(format!(
                        "a score-error study needs at least 3 sweep values, got {n_values}"
                    )));
                }
                if self.config.grid.n_steps.len() != 1 {
                    return Err(Error::Config(format!(
                        "a score-error study fixes one step count, got {}",
                        self.config.grid.n_steps.len()
                    )));
                }
                Ok(())
            }
        }
    }

    /// Error floor used when fitting slopes: the configured override, or
    /// the Monte Carlo plateau implied by the ensemble size.
    pub fn fit_floor(&self) -> f64 {
        self.config.fit_floor.unwrap_or_else(|| default_noise_floor(self.config.n_particles))
    }

    /// Integrates one ensemble and reduces it to an error report.
    ///
    /// The ensemble is drawn fresh from the master seed (so every run of a
    /// sweep starts from identical noise), integrated over `[0, horizon -
    /// tau]`, and compared against the exact noised target at forward time
    /// `tau`: total variation on the first coordinate through a kernel
    /// density estimate, and relative mean/covariance errors in closed
    /// form. Fails if more than 1 in 1000 trajectories diverges.
    pub fn run_single(&self, scheme: &Scheme, n_steps: usize, eps: f64) -> Result<RunRecord> {
        let start = Instant::now();
        let grid = TimeGrid::new(
            &self.schedule,
            self.config.grid.tau,
            self.config.grid.n_base,
            n_steps,
            scheme,
            self.config.grid.strict_alignment,
        )?;
        let dim = self.mixture.dim();
        let n = self.config.n_particles;
        let mut particles = sample_standard_normal(self.config.seed, n, dim);

        let field = ScoreField::new(self.mixture.clone(), self.schedule.clone(), eps)?;
        let mut integrator = Integrator::new(scheme.clone());
        integrator.simplified_a32 = self.config.simplified_a32;
        let outcome = solve_ensemble(&integrator, &self.schedule, &field, &grid, &mut particles)?;
        if outcome.n_diverged * DIVERGENCE_DENOMINATOR > outcome.n_total {
            let (first_step, first_stage, _) = outcome.first_divergence.unwrap_or((0, 0, 0));
            return Err(Error::RunFailed {
                n_diverged: outcome.n_diverged,
                n_total: outcome.n_total,
                first_step,
                first_stage,
            });
        }

        let tau = self.config.grid.tau;
        let first: Vec<f64> = particles
            .chunks_exact(dim)
            .zip(&outcome.alive)
            .filter(|(_, &a)| a)
            .map(|(row, _)| row[0])
            .collect();
        let h_bw = metrics::bandwidth(&first, self.config.kde.bandwidth_rule)?;
        let grid1 = metrics::default_grid(&first, h_bw, self.config.kde.grid_points)?;
        let estimate = kde_on_grid(&first, &grid1, h_bw)?;
        let truth: Vec<f64> = (0..grid1.len())
            .map(|i| self.mixture.marginal_density(&self.schedule, tau, grid1.point(i)))
            .collect::<Result<_>>()?;
        let tv = tv_error(&estimate, &truth, &grid1)?;

        let (mean_hat, _) = ensemble_mean(&particles, dim, Some(&outcome.alive))?;
        let cov_hat = ensemble_cov(&particles, dim, Some(&outcome.alive), &mean_hat)?;
        let (mean, cov) = self.mixture.moments(&self.schedule, tau)?;

        Ok(RunRecord {
            scheme: scheme.name(),
            dim,
            n_steps,
            h: grid.h(),
            eps_score: eps,
            n_particles: n,
            tv_error: tv,
            rel_mean_error: rel_mean_error(&mean_hat, &mean),
            rel_cov_error: rel_cov_error(&cov_hat, &cov),
            runtime_s: start.elapsed().as_secs_f64(),
            seed: self.config.seed,
        })
    }

    /// Every (scheme, step count, amplitude) combination, no slope fits.
    pub fn run_all(&self) -> Result<StudyResult> {
        let mut runs = Vec::new();
        for scheme in &self.schemes {
            for &n_steps in &self.config.grid.n_steps {
                let h = self.step_size(n_steps);
                let amplitudes = match &self.config.score_error {
                    ScoreErrorConfig::Sweep { values } => values.clone(),
                    rule => vec![rule.resolve(scheme.order(), h).expect("non-sweep resolves")],
                };
                for eps in amplitudes {
                    runs.push(self.run_single(scheme, n_steps, eps)?);
                }
            }
        }
        Ok(StudyResult { runs, summaries: Vec::new() })
    }

    /// One run per (scheme, step count) with the configured error rule,
    /// plus a fitted slope of `rel_mean_error` against `H` per scheme.
    pub fn convergence_study(&self) -> Result<StudyResult> {
        self.check_compatible(StudyKind::Convergence)?;
        let floor = self.fit_floor();
        let mut result = StudyResult::default();
        for scheme in &self.schemes {
            let mut points = Vec::new();
            for &n_steps in &self.config.grid.n_steps {
                let h = self.step_size(n_steps);
                let eps = self
                    .config
                    .score_error
                    .resolve(scheme.order(), h)
                    .expect("sweep rejected by check_compatible");
                let record = self.run_single(scheme, n_steps, eps)?;
                points.push((record.h, record.rel_mean_error));
                result.runs.push(record);
            }
            result.summaries.push(SchemeSummary {
                scheme: scheme.name(),
                dim: self.mixture.dim(),
                n_particles: self.config.n_particles,
                fitted_order: fit_order(&points, floor)?,
                seed: self.config.seed,
            });
        }
        Ok(result)
    }

    /// One run per (scheme, amplitude) at the single configured step count,
    /// plus a fitted slope of `rel_mean_error` against the amplitude.
    pub fn score_error_study(&self) -> Result<StudyResult> {
        self.check_compatible(StudyKind::ScoreError)?;
        let values = match &self.config.score_error {
            ScoreErrorConfig::Sweep { values } => values.clone(),
            _ => unreachable!("checked by check_compatible"),
        };
        let n_steps = self.config.grid.n_steps[0];
        let floor = self.fit_floor();
        let mut result = StudyResult::default();
        for scheme in &self.schemes {
            let mut points = Vec::new();
            for &eps in &values {
                let record = self.run_single(scheme, n_steps, eps)?;
                points.push((record.eps_score, record.rel_mean_error));
                result.runs.push(record);
            }
            result.summaries.push(SchemeSummary {
                scheme: scheme.name(),
                dim: self.mixture.dim(),
                n_particles: self.config.n_particles,
                fitted_order: fit_order(&points, floor)?,
                seed: self.config.seed,
            });
        }
        Ok(result)
    }

    /// Executes the study matching `kind`.
    pub fn run_study(&self, kind: StudyKind) -> Result<StudyResult> {
        match kind {
            StudyKind::Run => self.run_all(),
            StudyKind::Convergence => self.convergence_study(),
            StudyKind::ScoreError => self.score_error_study(),
        }
    }

    fn step_size(&self, n_steps: usize) -> f64 {
        (self.schedule.horizon() - self.config.grid.tau) / n_steps as f64
    }

    /// Human-readable companion to the CSV: the resolved config echoed as
    /// JSON plus the derived quantities a reader would otherwise recompute.
    pub fn manifest(&self) -> String {
        let mut text = String::new();
        let _ = writeln!(text, "resolved config (schema {SCHEMA_VERSION}):");
        let config_json = serde_json::to_string_pretty(&self.config)
            .expect("config serializes: it deserialized");
        text.push_str(&config_json);
        text.push('\n');
        let _ = writeln!(text, "\nderived quantities:");
        let horizon = self.schedule.horizon();
        let delta_t = horizon / self.config.grid.n_base as f64;
        let _ = writeln!(text, "  horizon T = {horizon}");
        let _ = writeln!(text, "  score lattice spacing dt = T/{} = {delta_t}", self.config.grid.n_base);
        let _ = writeln!(
            text,
            "  integration window [0, {}] (tau = {})",
            horizon - self.config.grid.tau,
            self.config.grid.tau
        );
        let _ = writeln!(
            text,
            "  target: dim = {}, components = {}",
            self.mixture.dim(),
            self.mixture.components().len()
        );
        let _ = writeln!(text, "  ensemble: J = {}", self.config.n_particles);
        let _ = writeln!(text, "  fit floor = {}", self.fit_floor());
        for scheme in &self.schemes {
            let nodes = scheme.nodes();
            let _ = writeln!(
                text,
                "  scheme {}: order {}, stage nodes {nodes:?}",
                scheme.name(),
                scheme.order()
            );
            for &n in &self.config.grid.n_steps {
                let h = self.step_size(n);
                let _ = writeln!(text, "    n_steps = {n}: H = {h} (H/dt = {})", h / delta_t);
            }
        }
        text
    }
}

/// CSV header — the column contract, in this exact order.
pub const CSV_HEADER: &str =
    "scheme,d,n_steps,H,eps_score,J,tv_error,rel_mean_error,rel_cov_error,fitted_order,runtime_s,seed";

/// Renders a study as CSV: the header, one row per run (blank
/// `fitted_order`), then one summary row per scheme carrying the fitted
/// slope with the sweep columns blank. Floats use the shortest
/// round-trippable decimal form except `runtime_s`, fixed at millisecond
/// precision.
pub fn render_csv(result: &StudyResult) -> String {
    let mut text = String::with_capacity(128 * (result.runs.len() + result.summaries.len() + 1));
    text.push_str(CSV_HEADER);
    text.push('\n');
    for r in &result.runs {
        let _ = writeln!(
            text,
            "{},{},{},{},{},{},{},{},{},,{:.3},{}",
            r.scheme,
            r.dim,
            r.n_steps,
            r.h,
            r.eps_score,
            r.n_particles,
            r.tv_error,
            r.rel_mean_error,
            r.rel_cov_error,
            r.runtime_s,
            r.seed
        );
    }
    for s in &result.summaries {
        let _ = writeln!(
            text,
            "{},{},,,,{},,,,{},,{}",
            s.scheme, s.dim, s.n_particles, s.fitted_order, s.seed
        );
    }
    text
}

/// Writes the CSV and its `<stem>.manifest.txt` companion next to it.
/// Returns the manifest path.
pub fn write_outputs(experiment: &Experiment, result: &StudyResult, out: &Path) -> Result<PathBuf> {
    std::fs::write(out, render_csv(result))?;
    let manifest_path = out.with_extension("manifest.txt");
    std::fs::write(&manifest_path, experiment.manifest())?;
    Ok(manifest_path)
}
