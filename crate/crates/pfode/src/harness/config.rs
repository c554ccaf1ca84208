//! The JSON experiment schema understood by the CLI.
//!
//! A config file is a single JSON object with a `schema_version` tag and
//! `deny_unknown_fields` everywhere, so a typo in a sweep definition is a
//! hard error rather than a silently ignored key. Everything the binary
//! does is reproducible from the file plus the seed: the resolved form is
//! echoed into the run manifest.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{BandwidthRule, DEFAULT_GRID_POINTS};
use crate::schedule::VarianceSchedule;
use crate::solver::{ExpRkScheme, Scheme};
use crate::target::{GaussianComponent, GaussianMixture};

/// The one schema this build reads. Bump on breaking layout changes.
pub const SCHEMA_VERSION: u32 = 1;

/// Smallest ensemble worth reporting statistics on.
pub const MIN_PARTICLES: usize = 100;

/// Top-level experiment description, deserialized from JSON.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub schedule: ScheduleConfig,
    pub grid: GridConfig,
    /// Scheme names from `{RK1, RK2, RK3, RK4, ExpRK1, ExpRK2, ExpRK3}`.
    pub schemes: Vec<String>,
    /// Interior node `c₂` for ExpRK2 (default 1.0, the midpoint-free form).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exprk2_node: Option<f64>,
    /// Nodes `(c₂, c₃)` for ExpRK3 (default `(1/3, 2/3)`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exprk3_nodes: Option<[f64; 2]>,
    /// Drop the third-order correction in the ExpRK3 `a₃₂` weight
    /// (replaces `φ₂` by `1/2`); a documented accuracy/robustness knob.
    #[serde(default)]
    pub simplified_a32: bool,
    pub target: TargetConfig,
    pub score_error: ScoreErrorConfig,
    /// Ensemble size `J`.
    pub n_particles: usize,
    /// Master RNG seed; every run in a sweep reuses it so runs share their
    /// initial ensemble (common random numbers).
    pub seed: u64,
    /// CSV destination. Optional: the CLI `--out` flag overrides it, and
    /// with neither the CSV goes to stdout.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    /// Error floor for order fits; defaults to the Monte Carlo plateau
    /// implied by `n_particles`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fit_floor: Option<f64>,
    #[serde(default)]
    pub kde: KdeConfig,
}

/// Forward-noising schedule family.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScheduleConfig {
    /// Constant rate `β ≡ 2` over `[0, horizon]`.
    ConstantOu { horizon: f64 },
    /// Rate ramping linearly from `beta_min` to `beta_max`.
    Linear { beta_min: f64, beta_max: f64, horizon: f64 },
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<VarianceSchedule> {
        match *self {
            ScheduleConfig::ConstantOu { horizon } => VarianceSchedule::constant_ou(horizon),
            ScheduleConfig::Linear { beta_min, beta_max, horizon } => {
                VarianceSchedule::linear(beta_min, beta_max, horizon)
            }
        }
    }
}

/// Time discretization: the score lattice and the solver step counts.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    /// Lattice resolution `N`; score evaluations live on `{j · horizon/N}`.
    pub n_base: usize,
    /// Early-stopping offset: integration covers `[0, horizon - tau]`.
    pub tau: f64,
    /// Solver step counts to run (a sweep for `convergence`, exactly one
    /// for `score-error`).
    pub n_steps: Vec<usize>,
    /// Reject any (scheme, n_steps) whose stage times leave the lattice.
    #[serde(default = "default_true")]
    pub strict_alignment: bool,
}

fn default_true() -> bool {
    true
}

/// Target distribution: spelled out, or drawn from the seeded recipe.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TargetConfig {
    Explicit { dim: usize, components: Vec<ComponentConfig> },
    RandomModes { dim: usize, modes: usize, seed: u64 },
}

/// One mixture component as written in JSON; `cov` is nested rows.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentConfig {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub cov: Vec<Vec<f64>>,
}

impl TargetConfig {
    pub fn build(&self) -> Result<GaussianMixture> {
        match self {
            TargetConfig::Explicit { dim, components } => {
                let d = *dim;
                let comps = components
                    .iter()
                    .map(|c| {
                        if c.mean.len() != d {
                            return Err(Error::Config(format!(
                                "component mean has length {}, expected dim = {d}",
                                c.mean.len()
                            )));
                        }
                        if c.cov.len() != d || c.cov.iter().any(|row| row.len() != d) {
                            return Err(Error::Config(format!(
                                "component covariance must be {d}×{d} nested rows"
                            )));
                        }
                        Ok(GaussianComponent {
                            weight: c.weight,
                            mean: c.mean.clone(),
                            cov: c.cov.iter().flatten().copied().collect(),
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                GaussianMixture::new(d, comps)
            }
            TargetConfig::RandomModes { dim, modes, seed } => {
                GaussianMixture::random_seeded(*dim, *modes, *seed)
            }
        }
    }
}

/// How much artificial score error to inject, and how it varies in a sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScoreErrorConfig {
    /// One amplitude for every run.
    Fixed { eps: f64 },
    /// One run per listed amplitude (the `score-error` subcommand).
    Sweep { values: Vec<f64> },
    /// `eps = constant · H^p`, with `p` the order of the scheme being run,
    /// so the injected error shrinks at the scheme's own rate.
    OrderMatched { constant: f64 },
}

impl ScoreErrorConfig {
    /// Amplitude for a run of a scheme of order `p` with step `h`. Sweeps
    /// have no single value; the caller iterates `values` itself.
    pub fn resolve(&self, order: u8, h: f64) -> Option<f64> {
        match self {
            ScoreErrorConfig::Fixed { eps } => Some(*eps),
            ScoreErrorConfig::Sweep { .. } => None,
            ScoreErrorConfig::OrderMatched { constant } => {
                Some(constant * h.powi(i32::from(order)))
            }
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |what: &str, v: f64| {
            Err(Error::Config(format!("score error {what} must be finite and ≥ 0, got {v}")))
        };
        match self {
            ScoreErrorConfig::Fixed { eps } => {
                if !eps.is_finite() || *eps < 0.0 {
                    return bad("eps", *eps);
                }
            }
            ScoreErrorConfig::Sweep { values } => {
                if values.is_empty() {
                    return Err(Error::Config("score error sweep has no values".into()));
                }
                for &v in values {
                    if !v.is_finite() || v < 0.0 {
                        return bad("sweep value", v);
                    }
                }
            }
            ScoreErrorConfig::OrderMatched { constant } => {
                if !constant.is_finite() || *constant < 0.0 {
                    return bad("constant", *constant);
                }
            }
        }
        Ok(())
    }
}

/// Density-estimate controls for the first-coordinate comparison.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KdeConfig {
    pub bandwidth_rule: BandwidthRule,
    pub grid_points: usize,
}

impl Default for KdeConfig {
    fn default() -> Self {
        Self { bandwidth_rule: BandwidthRule::default(), grid_points: DEFAULT_GRID_POINTS }
    }
}

impl ExperimentConfig {
    /// Parses and fully validates a JSON config string.
    pub fn from_json(text: &str) -> Result<Self> {
        let config: ExperimentConfig = serde_json::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    /// Structural checks that don't need the schedule/target built yet.
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} is not supported (this build reads {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.schemes.is_empty() {
            return Err(Error::Config("no schemes listed".into()));
        }
        if self.grid.n_steps.is_empty() {
            return Err(Error::Config("grid.n_steps is empty".into()));
        }
        if self.n_particles < MIN_PARTICLES {
            return Err(Error::Config(format!(
                "n_particles = {} is below the minimum of {MIN_PARTICLES}",
                self.n_particles
            )));
        }
        if self.kde.grid_points < 2 {
            return Err(Error::Config("kde.grid_points must be at least 2".into()));
        }
        if let Some(floor) = self.fit_floor {
            if !floor.is_finite() || floor < 0.0 {
                return Err(Error::Config(format!(
                    "fit_floor must be finite and ≥ 0, got {floor}"
                )));
            }
        }
        self.score_error.validate()?;
        for name in &self.schemes {
            self.parse_scheme(name)?;
        }
        Ok(())
    }

    /// Resolves a scheme name, applying any node overrides from the config.
    pub fn parse_scheme(&self, name: &str) -> Result<Scheme> {
        use crate::solver::ButcherTableau;
        match name {
            "RK1" => Ok(Scheme::Standard(ButcherTableau::rk1())),
            "RK2" => Ok(Scheme::Standard(ButcherTableau::rk2())),
            "RK3" => Ok(Scheme::Standard(ButcherTableau::rk3())),
            "RK4" => Ok(Scheme::Standard(ButcherTableau::rk4())),
            "ExpRK1" => Ok(Scheme::Exponential(ExpRkScheme::order1())),
            "ExpRK2" => {
                let c2 = self.exprk2_node.unwrap_or(1.0);
                Ok(Scheme::Exponential(ExpRkScheme::order2(c2)?))
            }
            "ExpRK3" => {
                let [c2, c3] = self.exprk3_nodes.unwrap_or([1.0 / 3.0, 2.0 / 3.0]);
                Ok(Scheme::Exponential(ExpRkScheme::order3(c2, c3)?))
            }
            other => Err(Error::Config(format!(
                "unknown scheme {other:?}; expected one of RK1..RK4, ExpRK1..ExpRK3"
            ))),
        }
    }
}
