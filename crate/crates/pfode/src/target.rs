//! Gaussian-mixture targets, their noised marginals, and score fields.
//!
//! A target is a mixture `Σ_k w_k N(m_k, C_k)`. Under a
//! [`VarianceSchedule`](crate::schedule::VarianceSchedule) the forward
//! process keeps the marginal a Gaussian mixture in closed form: at forward
//! time `u` component `k` becomes `N(λ(u) m_k, λ(u)² C_k + σ(u)² I)`. That
//! gives exact densities, scores, and moments at every time, which is what
//! makes these targets useful as ground truth.
//!
//! The score of the noised mixture is the responsibility-weighted sum
//!
//! ```text
//! ∇ log q_u(x) = -Σ_k r_k(x) Σ_k(u)⁻¹ (x - λ m_k),
//! r_k(x) = w_k N(x; λ m_k, Σ_k(u)) / q_u(x),
//! ```
//!
//! evaluated with log-sum-exp responsibilities and a cached Cholesky factor
//! per component, so it stays finite far into the tails.
//!
//! [`ScoreField`] wraps a mixture with an optional *controlled score error*:
//! a perturbation `ε · 𝟙 · staircase(x₁) / √d` whose Euclidean norm is
//! exactly `ε |staircase(x₁)|`. Integrators see score fields only through
//! the [`ScoreModel`]/[`FrozenEval`] traits, which also admit synthetic
//! fields in tests.

use crate::error::{Error, Result};
use crate::linalg;
use crate::schedule::VarianceSchedule;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Tolerance on `Σ w_k = 1` and on covariance symmetry.
const WEIGHT_TOLERANCE: f64 = 1e-12;

/// One mixture component: weight, mean, and row-major covariance.
#[derive(Debug, Clone)]
pub struct GaussianComponent {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub cov: Vec<f64>,
}

/// A validated Gaussian mixture in `d` dimensions.
#[derive(Debug, Clone)]
pub struct GaussianMixture {
    dim: usize,
    components: Vec<GaussianComponent>,
    /// Cholesky factor of each component covariance, for exact sampling.
    chol0: Vec<Vec<f64>>,
}

impl GaussianMixture {
    /// Validates and builds a mixture: weights strictly positive and summing
    /// to one, shapes consistent, covariances symmetric and positive
    /// definite.
    pub fn new(dim: usize, components: Vec<GaussianComponent>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidTarget("dimension must be positive".into()));
        }
        if components.is_empty() {
            return Err(Error::InvalidTarget("mixture needs at least one component".into()));
        }
        let mut weight_sum = 0.0;
        for (k, c) in components.iter().enumerate() {
            if !(c.weight > 0.0) || !c.weight.is_finite() {
                return Err(Error::InvalidTarget(format!(
                    "component {k}: weight must be positive and finite, got {}",
                    c.weight
                )));
            }
            weight_sum += c.weight;
            if c.mean.len() != dim {
                return Err(Error::InvalidTarget(format!(
                    "component {k}: mean has length {}, expected {dim}",
                    c.mean.len()
                )));
            }
            if c.cov.len() != dim * dim {
                return Err(Error::InvalidTarget(format!(
                    "component {k}: covariance has {} entries, expected {}",
                    c.cov.len(),
                    dim * dim
                )));
            }
            if c.mean.iter().chain(c.cov.iter()).any(|v| !v.is_finite()) {
                return Err(Error::InvalidTarget(format!(
                    "component {k}: non-finite mean or covariance entry"
                )));
            }
            let scale = c.cov.iter().fold(1.0f64, |m, v| m.max(v.abs()));
            for i in 0..dim {
                for j in 0..i {
                    if (c.cov[i * dim + j] - c.cov[j * dim + i]).abs() > WEIGHT_TOLERANCE * scale {
                        return Err(Error::InvalidTarget(format!(
                            "component {k}: covariance not symmetric at ({i}, {j})"
                        )));
                    }
                }
            }
        }
        if (weight_sum - 1.0).abs() > WEIGHT_TOLERANCE {
            return Err(Error::InvalidTarget(format!(
                "weights sum to {weight_sum}, expected 1"
            )));
        }
        let mut chol0 = Vec::with_capacity(components.len());
        for (k, c) in components.iter().enumerate() {
            match linalg::cholesky(&c.cov, dim) {
                Some(l) => chol0.push(l),
                None => {
                    return Err(Error::InvalidTarget(format!(
                        "component {k}: covariance is not positive definite"
                    )))
                }
            }
        }
        Ok(Self { dim, components, chol0 })
    }

    /// A reproducible random mixture for high-dimensional experiments:
    /// means uniform in `[-3, 3]^d`, covariances `A Aᵀ / d + I/2` with `A`
    /// a matrix of standard normals, and Dirichlet(1) weights.
    pub fn random_seeded(dim: usize, n_modes: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut raw_weights = Vec::with_capacity(n_modes);
        let mut components = Vec::with_capacity(n_modes);
        for _ in 0..n_modes {
            // Dirichlet(1, ..., 1) = normalized iid Exp(1) draws.
            let u: f64 = rng.random::<f64>();
            raw_weights.push(-(1.0 - u).ln());
            let mean: Vec<f64> = (0..dim).map(|_| rng.random::<f64>() * 6.0 - 3.0).collect();
            let a: Vec<f64> = (0..dim * dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let mut cov = vec![0.0; dim * dim];
            for i in 0..dim {
                for j in 0..=i {
                    let mut s = 0.0;
                    for k in 0..dim {
                        s += a[i * dim + k] * a[j * dim + k];
                    }
                    s /= dim as f64;
                    if i == j {
                        s += 0.5;
                    }
                    cov[i * dim + j] = s;
                    cov[j * dim + i] = s;
                }
            }
            components.push(GaussianComponent { weight: 0.0, mean, cov });
        }
        let total: f64 = raw_weights.iter().sum();
        // Renormalize so the sum is exactly 1 up to one final rounding.
        let mut acc = 0.0;
        for (c, w) in components.iter_mut().zip(&raw_weights) {
            c.weight = w / total;
            acc += c.weight;
        }
        if let Some(last) = components.last_mut() {
            last.weight += 1.0 - acc;
        }
        Self::new(dim, components)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn components(&self) -> &[GaussianComponent] {
        &self.components
    }

    /// The mixture frozen at forward time `u`: component `k` becomes
    /// `N(λ m_k, λ² C_k + σ² I)` with factored covariances ready for
    /// repeated density and score evaluation.
    pub fn at_forward_time(&self, schedule: &VarianceSchedule, u: f64) -> Result<FrozenMixture> {
        let lambda = schedule.lambda(u)?;
        let sigma = schedule.sigma(u)?;
        FrozenMixture::build(self, lambda, sigma)
    }

    /// Exact mean and covariance (row-major) of the noised mixture at
    /// forward time `u`.
    pub fn moments(&self, schedule: &VarianceSchedule, u: f64) -> Result<(Vec<f64>, Vec<f64>)> {
        let lambda = schedule.lambda(u)?;
        let sigma = schedule.sigma(u)?;
        let (l2, s2) = (lambda * lambda, sigma * sigma);
        let d = self.dim;
        let mut mean = vec![0.0; d];
        for c in &self.components {
            for i in 0..d {
                mean[i] += c.weight * lambda * c.mean[i];
            }
        }
        let mut cov = vec![0.0; d * d];
        for c in &self.components {
            for i in 0..d {
                for j in 0..d {
                    let mut v = l2 * c.cov[i * d + j] + l2 * c.mean[i] * c.mean[j];
                    if i == j {
                        v += s2;
                    }
                    cov[i * d + j] += c.weight * v;
                }
            }
        }
        for i in 0..d {
            for j in 0..d {
                cov[i * d + j] -= mean[i] * mean[j];
            }
        }
        Ok((mean, cov))
    }

    /// Density of the first coordinate of the noised mixture at forward
    /// time `u` — a one-dimensional mixture in closed form.
    pub fn marginal_density(&self, schedule: &VarianceSchedule, u: f64, y: f64) -> Result<f64> {
        let lambda = schedule.lambda(u)?;
        let sigma = schedule.sigma(u)?;
        let (l2, s2) = (lambda * lambda, sigma * sigma);
        let mut p = 0.0;
        for c in &self.components {
            let var = l2 * c.cov[0] + s2;
            let z = y - lambda * c.mean[0];
            p += c.weight * (-0.5 * z * z / var).exp() / (2.0 * std::f64::consts::PI * var).sqrt();
        }
        Ok(p)
    }

    /// Draws `n` exact samples (flat, row-major `n × d`) from the target.
    pub fn sample(&self, seed: u64, n: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = self.dim;
        let mut out = vec![0.0; n * d];
        let mut z = vec![0.0; d];
        for row in out.chunks_exact_mut(d) {
            let mut u: f64 = rng.random();
            let mut k = self.components.len() - 1;
            for (i, c) in self.components.iter().enumerate() {
                if u < c.weight {
                    k = i;
                    break;
                }
                u -= c.weight;
            }
            for zi in z.iter_mut() {
                *zi = rng.sample::<f64, _>(StandardNormal);
            }
            linalg::mul_lower(&self.chol0[k], d, &z, row);
            for (ri, mi) in row.iter_mut().zip(&self.components[k].mean) {
                *ri += mi;
            }
        }
        out
    }
}

/// Reusable buffers for density/score evaluation. One per worker thread;
/// grown on first use and allocation-free afterwards.
#[derive(Debug, Default, Clone)]
pub struct EvalScratch {
    y: Vec<f64>,
    solved: Vec<f64>,
    logp: Vec<f64>,
}

impl EvalScratch {
    pub fn new() -> Self {
        Self::default()
    }

    fn ensure(&mut self, dim: usize, n_comp: usize) {
        if self.y.len() != dim {
            self.y.resize(dim, 0.0);
        }
        if self.solved.len() != n_comp * dim {
            self.solved.resize(n_comp * dim, 0.0);
        }
        if self.logp.len() != n_comp {
            self.logp.resize(n_comp, 0.0);
        }
    }
}

struct FrozenComponent {
    log_weight: f64,
    scaled_mean: Vec<f64>,
    /// Packed Cholesky factor of `λ² C + σ² I`.
    chol: Vec<f64>,
    /// `-½ (ln det Σ + d ln 2π)`.
    log_norm: f64,
}

/// A mixture with its time dependence resolved: fixed `λ`, `σ`, and one
/// factored covariance per component.
pub struct FrozenMixture {
    dim: usize,
    lambda: f64,
    sigma: f64,
    comps: Vec<FrozenComponent>,
}

impl FrozenMixture {
    fn build(mixture: &GaussianMixture, lambda: f64, sigma: f64) -> Result<Self> {
        let d = mixture.dim;
        let (l2, s2) = (lambda * lambda, sigma * sigma);
        let mut comps = Vec::with_capacity(mixture.components.len());
        let mut cov = vec![0.0; d * d];
        for (k, c) in mixture.components.iter().enumerate() {
            for i in 0..d {
                for j in 0..d {
                    cov[i * d + j] = l2 * c.cov[i * d + j];
                }
                cov[i * d + i] += s2;
            }
            let chol = linalg::cholesky(&cov, d).ok_or_else(|| {
                Error::InvalidTarget(format!(
                    "component {k}: noised covariance not positive definite (λ={lambda}, σ={sigma})"
                ))
            })?;
            let log_norm = -0.5 * (linalg::log_det(&chol, d) + d as f64 * (2.0 * std::f64::consts::PI).ln());
            comps.push(FrozenComponent {
                log_weight: c.weight.ln(),
                scaled_mean: c.mean.iter().map(|m| lambda * m).collect(),
                chol,
                log_norm,
            });
        }
        Ok(Self { dim: d, lambda, sigma, comps })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// Per-component log joint `ln w_k + ln N(x; λ m_k, Σ_k)`, written into
    /// `scratch.logp`, with `L⁻¹ (x - λ m_k)` left in `scratch.solved`.
    fn log_joints(&self, x: &[f64], scratch: &mut EvalScratch) {
        let d = self.dim;
        scratch.ensure(d, self.comps.len());
        for (k, comp) in self.comps.iter().enumerate() {
            let w = &mut scratch.solved[k * d..(k + 1) * d];
            for i in 0..d {
                w[i] = x[i] - comp.scaled_mean[i];
            }
            linalg::forward_solve(&comp.chol, d, w);
            let quad: f64 = w.iter().map(|v| v * v).sum();
            scratch.logp[k] = comp.log_weight + comp.log_norm - 0.5 * quad;
        }
    }

    /// `ln q(x)` via log-sum-exp over components.
    pub fn log_density(&self, x: &[f64], scratch: &mut EvalScratch) -> f64 {
        self.log_joints(x, scratch);
        let max = scratch.logp.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = scratch.logp.iter().map(|lp| (lp - max).exp()).sum();
        max + sum.ln()
    }

    /// `∇ ln q(x)`, written into `out`.
    pub fn score_into(&self, x: &[f64], out: &mut [f64], scratch: &mut EvalScratch) {
        let d = self.dim;
        self.log_joints(x, scratch);
        let max = scratch.logp.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = scratch.logp.iter().map(|lp| (lp - max).exp()).sum();
        let log_z = max + sum.ln();
        out[..d].fill(0.0);
        for (k, comp) in self.comps.iter().enumerate() {
            let resp = (scratch.logp[k] - log_z).exp();
            if resp == 0.0 {
                continue;
            }
            // Finish the solve: g = Σ⁻¹ (x - λ m_k).
            let g = &mut scratch.solved[k * d..(k + 1) * d];
            linalg::backward_solve(&comp.chol, d, g);
            for i in 0..d {
                out[i] -= resp * g[i];
            }
        }
    }

    #[cfg(test)]
    fn responsibilities(&self, x: &[f64]) -> Vec<f64> {
        let mut scratch = EvalScratch::new();
        self.log_joints(x, &mut scratch);
        let max = scratch.logp.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = scratch.logp.iter().map(|lp| (lp - max).exp()).sum();
        let log_z = max + sum.ln();
        scratch.logp.iter().map(|lp| (lp - log_z).exp()).collect()
    }
}

/// Piecewise-quadratic staircase: a `C¹` function that gains one unit per
/// two-integer cell, with curvature `+1` on even cells `[2n, 2n+1)` and `-1`
/// on odd cells `[2n+1, 2n+2)`:
///
/// ```text
/// staircase(x) = n + (x - ⌊x⌋)² / 2          if ⌊x⌋ = 2n
/// staircase(x) = n + 1 - (1 + ⌊x⌋ - x)² / 2  if ⌊x⌋ = 2n + 1
/// ```
///
/// Used as a spatial profile for controlled score perturbations: smooth but
/// with curvature that flips sign cell to cell.
pub fn staircase(x: f64) -> f64 {
    let f = x.floor();
    let frac = x - f;
    let half = 0.5 * f;
    if half == half.floor() {
        // Even cell: ⌊x⌋ = 2n with n = f/2.
        half + 0.5 * frac * frac
    } else {
        // Odd cell: ⌊x⌋ = 2n + 1 with n = (f-1)/2.
        let n = 0.5 * (f - 1.0);
        let r = 1.0 - frac;
        n + 1.0 - 0.5 * r * r
    }
}

/// How integrators see a score field: something that can be *frozen* at a
/// reverse time, yielding a cheap repeated evaluator.
pub trait ScoreModel: Sync {
    type Frozen: FrozenEval;

    fn dim(&self) -> usize;

    /// Resolves all time dependence at reverse time `t`, i.e. forward time
    /// `T - t`. The frozen evaluator is shared read-only across particles.
    fn freeze(&self, t: f64) -> Result<Self::Frozen>;
}

/// A score field frozen at one time.
pub trait FrozenEval: Send + Sync {
    fn dim(&self) -> usize;

    /// Score `s(x)` into `out`.
    fn score_into(&self, x: &[f64], out: &mut [f64], scratch: &mut EvalScratch);

    /// Noise-prediction form `ε(x) = σ(T-t) · s(x)` into `out`; the natural
    /// right-hand side for the exponential integrators.
    fn eps_into(&self, x: &[f64], out: &mut [f64], scratch: &mut EvalScratch);
}

/// The exact mixture score with an optional controlled error of size
/// `eps · staircase(x₁) / √d` added to every coordinate.
pub struct ScoreField {
    mixture: GaussianMixture,
    schedule: VarianceSchedule,
    eps: f64,
}

impl ScoreField {
    /// `eps = 0` gives the exact score, bit for bit.
    pub fn new(mixture: GaussianMixture, schedule: VarianceSchedule, eps: f64) -> Result<Self> {
        if !eps.is_finite() || eps < 0.0 {
            return Err(Error::Domain(format!(
                "score error magnitude must be finite and non-negative, got {eps}"
            )));
        }
        Ok(Self { mixture, schedule, eps })
    }

    pub fn mixture(&self) -> &GaussianMixture {
        &self.mixture
    }

    pub fn schedule(&self) -> &VarianceSchedule {
        &self.schedule
    }
}

impl ScoreModel for ScoreField {
    type Frozen = FrozenScore;

    fn dim(&self) -> usize {
        self.mixture.dim()
    }

    fn freeze(&self, t: f64) -> Result<FrozenScore> {
        let u = self.schedule.horizon() - t;
        let inner = self.mixture.at_forward_time(&self.schedule, u)?;
        Ok(FrozenScore {
            eps: self.eps,
            inv_sqrt_d: 1.0 / (self.mixture.dim() as f64).sqrt(),
            inner,
        })
    }
}

/// [`ScoreField`] frozen at one reverse time.
pub struct FrozenScore {
    inner: FrozenMixture,
    eps: f64,
    inv_sqrt_d: f64,
}

impl FrozenEval for FrozenScore {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn score_into(&self, x: &[f64], out: &mut [f64], scratch: &mut EvalScratch) {
        self.inner.score_into(x, out, scratch);
        if self.eps != 0.0 {
            let bump = self.eps * staircase(x[0]) * self.inv_sqrt_d;
            for o in out.iter_mut() {
                *o += bump;
            }
        }
    }

    fn eps_into(&self, x: &[f64], out: &mut [f64], scratch: &mut EvalScratch) {
        self.score_into(x, out, scratch);
        let sigma = self.inner.sigma();
        for o in out.iter_mut() {
            *o *= sigma;
        }
    }
}
