//! Fixed-step integrators for the reverse-time sampling ODE.
//!
//! The dynamics being integrated are
//!
//! ```text
//! dY/dt = ½ β(T - t) · (Y + s_t(Y)),    t ∈ [0, T - τ],
//! ```
//!
//! where `s_t` is the (possibly perturbed) score of the noised target at
//! reverse time `t`. Two integrator families are provided:
//!
//! * **Standard explicit Runge-Kutta** ([`ButcherTableau`]): the right-hand
//!   side above is evaluated as-is at each stage.
//! * **Exponential Runge-Kutta** ([`ExpRkScheme`]): the stiff linear part
//!   `½ β Y` is propagated exactly through factors `exp(Δζ)`, and only the
//!   noise-prediction field `ε_t(x) = σ(T-t) s_t(x)` is approximated, with
//!   weights built from the `φ` functions evaluated at increments of the
//!   clock `α`. This keeps large steps stable where the standard schemes
//!   must resolve the fast contraction.
//!
//! Score evaluations happen on a fixed time lattice `{j·Δt}`: [`TimeGrid`]
//! checks that every stage time of the chosen scheme lands on the lattice
//! (within `1e-9 Δt`) unless strict alignment is disabled, which is
//! legitimate for analytically known score fields.
//!
//! Work is organized per step: [`Integrator::plan_step`] freezes the score
//! field and precomputes all scalar coefficients once, and the resulting
//! [`StepPlan`] is applied to every particle in parallel. Results are
//! bitwise independent of the number of worker threads because particles
//! never interact.

use crate::error::{Error, Result};
use crate::schedule::{phi, VarianceSchedule};
use crate::target::{EvalScratch, FrozenEval, ScoreModel};
use rayon::prelude::*;

/// Stage times must sit within this fraction of `Δt` from a lattice point.
const ALIGNMENT_TOLERANCE: f64 = 1e-9;

/// Particles are processed in fixed-size chunks so that parallel execution
/// is deterministic regardless of thread count.
pub const ENSEMBLE_CHUNK: usize = 4096;

// ---------------------------------------------------------------------------
// Schemes
// ---------------------------------------------------------------------------

/// An explicit Runge-Kutta tableau (strictly lower-triangular `a`).
#[derive(Debug, Clone)]
pub struct ButcherTableau {
    name: &'static str,
    order: u8,
    c: Vec<f64>,
    a: Vec<Vec<f64>>,
    b: Vec<f64>,
}

impl ButcherTableau {
    /// Forward Euler.
    pub fn rk1() -> Self {
        Self::checked("RK1", 1, vec![0.0], vec![vec![]], vec![1.0])
    }

    /// Heun's two-stage, second-order method.
    pub fn rk2() -> Self {
        Self::checked("RK2", 2, vec![0.0, 1.0], vec![vec![], vec![1.0]], vec![0.5, 0.5])
    }

    /// Three-stage, third-order method with nodes `{0, 1/3, 2/3}`.
    pub fn rk3() -> Self {
        Self::checked(
            "RK3",
            3,
            vec![0.0, 1.0 / 3.0, 2.0 / 3.0],
            vec![vec![], vec![1.0 / 3.0], vec![0.0, 2.0 / 3.0]],
            vec![0.25, 0.0, 0.75],
        )
    }

    /// The classical four-stage, fourth-order method.
    pub fn rk4() -> Self {
        Self::checked(
            "RK4",
            4,
            vec![0.0, 0.5, 0.5, 1.0],
            vec![vec![], vec![0.5], vec![0.0, 0.5], vec![0.0, 0.0, 1.0]],
            vec![1.0 / 6.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 6.0],
        )
    }

    fn checked(name: &'static str, order: u8, c: Vec<f64>, a: Vec<Vec<f64>>, b: Vec<f64>) -> Self {
        let t = Self { name, order, c, a, b };
        t.validate().expect("built-in tableau must be consistent");
        t
    }

    /// Consistency conditions: `c₁ = 0`, `Σ b_j = 1`, and each node equals
    /// its row sum, `c_j = Σ_l a_jl`.
    pub fn validate(&self) -> Result<()> {
        let s = self.c.len();
        if self.a.len() != s || self.b.len() != s {
            return Err(Error::Domain(format!("tableau {}: inconsistent shapes", self.name)));
        }
        if self.c[0] != 0.0 {
            return Err(Error::Domain(format!("tableau {}: c1 must be 0", self.name)));
        }
        let bsum: f64 = self.b.iter().sum();
        if (bsum - 1.0).abs() > 1e-14 {
            return Err(Error::Domain(format!("tableau {}: weights sum to {bsum}", self.name)));
        }
        for (j, row) in self.a.iter().enumerate() {
            if row.len() != j {
                return Err(Error::Domain(format!(
                    "tableau {}: row {j} must have {j} entries",
                    self.name
                )));
            }
            let rsum: f64 = row.iter().sum();
            if (rsum - self.c[j]).abs() > 1e-14 {
                return Err(Error::Domain(format!(
                    "tableau {}: row {j} sums to {rsum}, node is {}",
                    self.name, self.c[j]
                )));
            }
        }
        Ok(())
    }

    pub fn name(&self) -> &'static str {
        self.name
    }

    pub fn order(&self) -> u8 {
        self.order
    }

    pub fn stages(&self) -> usize {
        self.c.len()
    }

    pub fn nodes(&self) -> &[f64] {
        &self.c
    }
}

/// An exponential Runge-Kutta scheme of order 1, 2, or 3.
///
/// Orders 2 and 3 are one-parameter and two-parameter families in the
/// internal nodes; the classical choices are `c₂ = 1` and
/// `(c₂, c₃) = (1/3, 2/3)`.
#[derive(Debug, Clone, Copy)]
pub struct ExpRkScheme {
    order: u8,
    c2: f64,
    c3: f64,
}

impl ExpRkScheme {
    /// Exponential Euler.
    pub fn order1() -> Self {
        Self { order: 1, c2: 0.0, c3: 0.0 }
    }

    /// Two-stage scheme with internal node `0 < c2 <= 1`.
    pub fn order2(c2: f64) -> Result<Self> {
        if !(c2 > 0.0 && c2 <= 1.0) {
            return Err(Error::Domain(format!("order-2 node must satisfy 0 < c2 <= 1, got {c2}")));
        }
        Ok(Self { order: 2, c2, c3: 0.0 })
    }

    /// Three-stage scheme with nodes `0 < c2 < c3 <= 1`. The weight ratio
    /// `γ = (3c₃² - 2c₃) / (3c₂² - 2c₂)` must be defined, so `c₂ ≠ 2/3`.
    pub fn order3(c2: f64, c3: f64) -> Result<Self> {
        if !(c2 > 0.0 && c2 < c3 && c3 <= 1.0) {
            return Err(Error::Domain(format!(
                "order-3 nodes must satisfy 0 < c2 < c3 <= 1, got ({c2}, {c3})"
            )));
        }
        if (3.0 * c2 * c2 - 2.0 * c2).abs() < 1e-12 {
            return Err(Error::Domain(format!(
                "order-3 node c2 = {c2} makes the weight ratio undefined"
            )));
        }
        Ok(Self { order: 3, c2, c3 })
    }

    pub fn order(&self) -> u8 {
        self.order
    }

    /// `γ`, the ratio tying the two internal weights together (order 3).
    pub fn gamma(&self) -> f64 {
        debug_assert_eq!(self.order, 3);
        (3.0 * self.c3 * self.c3 - 2.0 * self.c3) / (3.0 * self.c2 * self.c2 - 2.0 * self.c2)
    }

    pub fn nodes(&self) -> Vec<f64> {
        match self.order {
            1 => vec![0.0],
            2 => vec![0.0, self.c2],
            _ => vec![0.0, self.c2, self.c3],
        }
    }

    pub fn name(&self) -> &'static str {
        match self.order {
            1 => "ExpRK1",
            2 => "ExpRK2",
            _ => "ExpRK3",
        }
    }
}

/// Either integrator family, under one interface.
#[derive(Debug, Clone)]
pub enum Scheme {
    Standard(ButcherTableau),
    Exponential(ExpRkScheme),
}

impl Scheme {
    pub fn name(&self) -> &'static str {
        match self {
            Scheme::Standard(t) => t.name(),
            Scheme::Exponential(e) => e.name(),
        }
    }

    /// Nominal convergence order.
    pub fn order(&self) -> u8 {
        match self {
            Scheme::Standard(t) => t.order(),
            Scheme::Exponential(e) => e.order(),
        }
    }

    /// Stage nodes `c_j` (as fractions of the step).
    pub fn nodes(&self) -> Vec<f64> {
        match self {
            Scheme::Standard(t) => t.nodes().to_vec(),
            Scheme::Exponential(e) => e.nodes(),
        }
    }

    pub fn stages(&self) -> usize {
        self.nodes().len()
    }
}

// ---------------------------------------------------------------------------
// Time grid
// ---------------------------------------------------------------------------

/// A uniform reverse-time grid over `[0, T - τ]` whose stage times land on
/// the score-evaluation lattice `{j Δt, j = 0..N}` with `Δt = T / N`.
#[derive(Debug, Clone)]
pub struct TimeGrid {
    h: f64,
    n_steps: usize,
    delta_t: f64,
    t_end: f64,
    /// `h / Δt` when strict alignment holds, so grid times can be formed as
    /// exact lattice multiples.
    steps_per_node: Option<u64>,
    strict: bool,
}

impl TimeGrid {
    /// Builds the grid, checking lattice alignment of every stage time of
    /// `scheme` unless `strict` is false.
    ///
    /// `n_base` is the lattice resolution `N`; `tau` is the early-stopping
    /// offset, leaving the integration window `[0, T - τ]`.
    pub fn new(
        schedule: &VarianceSchedule,
        tau: f64,
        n_base: usize,
        n_steps: usize,
        scheme: &Scheme,
        strict: bool,
    ) -> Result<Self> {
        let horizon = schedule.horizon();
        if !(tau >= 0.0 && tau < horizon) || !tau.is_finite() {
            return Err(Error::Domain(format!(
                "early-stop offset must lie in [0, horizon), got {tau}"
            )));
        }
        if n_base == 0 || n_steps == 0 {
            return Err(Error::Domain("grid needs n_base >= 1 and n_steps >= 1".into()));
        }
        let delta_t = horizon / n_base as f64;
        let t_end = horizon - tau;
        let h = t_end / n_steps as f64;
        let mut steps_per_node = None;
        if strict {
            let ratio = h / delta_t;
            let k = ratio.round();
            if k < 1.0 || (ratio - k).abs() > ALIGNMENT_TOLERANCE {
                return Err(Error::Misaligned(format!(
                    "step h = {h} is not a multiple of the lattice spacing Δt = {delta_t} \
                     (h/Δt = {ratio})"
                )));
            }
            for &c in &scheme.nodes() {
                let stage_ratio = c * k;
                if (stage_ratio - stage_ratio.round()).abs() > ALIGNMENT_TOLERANCE {
                    return Err(Error::Misaligned(format!(
                        "{} stage at node {c} evaluates at time offset {} which is not a \
                         multiple of Δt = {delta_t}",
                        scheme.name(),
                        c * h
                    )));
                }
            }
            steps_per_node = Some(k as u64);
        }
        Ok(Self { h, n_steps, delta_t, t_end, steps_per_node, strict })
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn delta_t(&self) -> f64 {
        self.delta_t
    }

    pub fn t_end(&self) -> f64 {
        self.t_end
    }

    pub fn strict(&self) -> bool {
        self.strict
    }

    /// Time of the `i`-th grid point, `i = 0..=n_steps`. Formed as a single
    /// product (an exact lattice multiple when aligned) so there is no
    /// accumulation drift.
    pub fn time(&self, i: usize) -> f64 {
        match self.steps_per_node {
            Some(k) => (i as u64 * k) as f64 * self.delta_t,
            None => i as f64 * self.h,
        }
    }
}

// ---------------------------------------------------------------------------
// Step planning and execution
// ---------------------------------------------------------------------------

/// Convenience evaluation of the full right-hand side
/// `½ β(T-t) (x + s_t(x))` at one point.
pub fn velocity_into<M: ScoreModel>(
    schedule: &VarianceSchedule,
    model: &M,
    t: f64,
    x: &[f64],
    out: &mut [f64],
) -> Result<()> {
    let half_beta = 0.5 * schedule.beta(schedule.horizon() - t)?;
    let frozen = model.freeze(t)?;
    let mut scratch = EvalScratch::new();
    frozen.score_into(x, out, &mut scratch);
    for (o, xi) in out.iter_mut().zip(x) {
        *o = half_beta * (xi + *o);
    }
    Ok(())
}

/// Scalar coefficients of one exponential step (all premultiplied by the
/// step size where applicable).
#[derive(Debug, Clone)]
pub struct ExpCoefficients {
    /// `exp(Δζ_j)` per stage (first entry is 1).
    pub e_stage: Vec<f64>,
    /// `exp(Δζ)` for the full step.
    pub e_end: f64,
    /// Strictly lower-triangular stage couplings, times `H`.
    pub a_h: Vec<Vec<f64>>,
    /// Output weights, times `H`.
    pub b_h: Vec<f64>,
}

/// Builds the exponential-integrator coefficients for one step from `t` of
/// size `h`. Exposed separately so the weights can be validated against
/// quadrature in tests.
pub fn exp_coefficients(
    scheme: &ExpRkScheme,
    schedule: &VarianceSchedule,
    t: f64,
    h: f64,
    simplified_a32: bool,
) -> Result<ExpCoefficients> {
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::Domain(format!("step size must be positive, got {h}")));
    }
    let horizon = schedule.horizon();
    let t_end = t + h;
    let dz_end = schedule.zeta_between(t, t_end)?;
    let da_end = schedule.alpha_between(t, t_end)?;
    let sig_end = schedule.sigma(horizon - t_end)?;
    let e_end = dz_end.exp();
    match scheme.order {
        1 => Ok(ExpCoefficients {
            e_stage: vec![1.0],
            e_end,
            a_h: vec![vec![]],
            b_h: vec![sig_end * da_end * phi(1, da_end)],
        }),
        2 => {
            let t2 = t + scheme.c2 * h;
            let dz2 = schedule.zeta_between(t, t2)?;
            let da2 = schedule.alpha_between(t, t2)?;
            let sig2 = schedule.sigma(horizon - t2)?;
            if da2 == 0.0 {
                return Err(Error::DegenerateCoefficients(format!(
                    "clock increment vanishes on stage interval [{t}, {t2}]"
                )));
            }
            let a21_h = sig2 * da2 * phi(1, da2);
            let b2_h = sig_end * da_end * da_end * phi(2, da_end) / da2;
            let b1_h = sig_end * da_end * phi(1, da_end) - b2_h;
            Ok(ExpCoefficients {
                e_stage: vec![1.0, dz2.exp()],
                e_end,
                a_h: vec![vec![], vec![a21_h]],
                b_h: vec![b1_h, b2_h],
            })
        }
        _ => {
            let gamma = scheme.gamma();
            let t2 = t + scheme.c2 * h;
            let t3 = t + scheme.c3 * h;
            let dz2 = schedule.zeta_between(t, t2)?;
            let dz3 = schedule.zeta_between(t, t3)?;
            let da2 = schedule.alpha_between(t, t2)?;
            let da3 = schedule.alpha_between(t, t3)?;
            let sig2 = schedule.sigma(horizon - t2)?;
            let sig3 = schedule.sigma(horizon - t3)?;
            if da2 == 0.0 {
                return Err(Error::DegenerateCoefficients(format!(
                    "clock increment vanishes on stage interval [{t}, {t2}]"
                )));
            }
            let a32_h = if simplified_a32 {
                // Leading term only: φ₂ replaced by φ₂(0) = ½.
                (gamma * sig2 * da2 * da2 + sig3 * da3 * da3) / (2.0 * da2)
            } else {
                (gamma * sig2 * da2 * da2 * phi(2, da2) + sig3 * da3 * da3 * phi(2, da3)) / da2
            };
            let a31_h = sig3 * da3 * phi(1, da3) - a32_h;
            let denom = gamma * da2 + da3;
            if denom == 0.0 {
                return Err(Error::DegenerateCoefficients(format!(
                    "output weights undefined: γ Δα₂ + Δα₃ = 0 on step at t = {t}"
                )));
            }
            let b3_h = sig_end * da_end * da_end * phi(2, da_end) / denom;
            let b2_h = gamma * b3_h;
            let b1_h = sig_end * da_end * phi(1, da_end) - (1.0 + gamma) * b3_h;
            Ok(ExpCoefficients {
                e_stage: vec![1.0, dz2.exp(), dz3.exp()],
                e_end,
                a_h: vec![vec![], vec![a21_h_order3(sig2, da2)], vec![a31_h, a32_h]],
                b_h: vec![b1_h, b2_h, b3_h],
            })
        }
    }
}

/// `a₂₁ H = σ₂ Δα₂ φ₁(Δα₂)` — shared between orders 2 and 3.
fn a21_h_order3(sig2: f64, da2: f64) -> f64 {
    sig2 * da2 * phi(1, da2)
}

/// Everything needed to advance any particle across one step: frozen score
/// evaluators per distinct stage time plus scalar coefficients.
pub struct StepPlan<F> {
    h: f64,
    dim: usize,
    /// Frozen evaluators for distinct stage times.
    frozen: Vec<F>,
    /// Stage index -> index into `frozen` (stages may share a time).
    stage_eval: Vec<usize>,
    kind: PlanKind,
}

enum PlanKind {
    Standard {
        half_beta: Vec<f64>,
        a: Vec<Vec<f64>>,
        b: Vec<f64>,
    },
    Exponential(ExpCoefficients),
}

impl<F> StepPlan<F> {
    pub fn stages(&self) -> usize {
        self.stage_eval.len()
    }
}

/// Reusable per-thread buffers for stepping.
#[derive(Default)]
pub struct StepScratch {
    stage_x: Vec<f64>,
    k: Vec<f64>,
    eval: EvalScratch,
}

impl StepScratch {
    pub fn new() -> Self {
        Self::default()
    }

    fn ensure(&mut self, dim: usize, stages: usize) {
        if self.stage_x.len() != dim {
            self.stage_x.resize(dim, 0.0);
        }
        if self.k.len() != stages * dim {
            self.k.resize(stages * dim, 0.0);
        }
    }
}

/// A scheme plus execution options.
#[derive(Debug, Clone)]
pub struct Integrator {
    scheme: Scheme,
    /// Use the leading-order form of the third-order internal coupling
    /// (comparison knob; the full expression is the default).
    pub simplified_a32: bool,
}

impl Integrator {
    pub fn new(scheme: Scheme) -> Self {
        Self { scheme, simplified_a32: false }
    }

    pub fn scheme(&self) -> &Scheme {
        &self.scheme
    }

    /// Freezes the score field at every stage time of the step from `t` and
    /// precomputes all scalar coefficients.
    pub fn plan_step<M: ScoreModel>(
        &self,
        schedule: &VarianceSchedule,
        model: &M,
        grid: &TimeGrid,
        step_index: usize,
    ) -> Result<StepPlan<M::Frozen>> {
        let t = grid.time(step_index);
        let h = grid.h();
        let nodes = self.scheme.nodes();
        let mut frozen = Vec::new();
        let mut stage_eval = Vec::with_capacity(nodes.len());
        let mut seen: Vec<f64> = Vec::with_capacity(nodes.len());
        for &c in &nodes {
            let ts = t + c * h;
            #[cfg(debug_assertions)]
            if grid.strict() {
                let r = ts / grid.delta_t();
                debug_assert!(
                    (r - r.round()).abs() <= ALIGNMENT_TOLERANCE,
                    "stage time {ts} off the score lattice"
                );
            }
            match seen.iter().position(|&s| s == c) {
                Some(idx) => stage_eval.push(idx),
                None => {
                    frozen.push(model.freeze(ts)?);
                    seen.push(c);
                    stage_eval.push(frozen.len() - 1);
                }
            }
        }
        let kind = match &self.scheme {
            Scheme::Standard(tab) => {
                let mut half_beta = Vec::with_capacity(nodes.len());
                for &c in &nodes {
                    half_beta.push(0.5 * schedule.beta(schedule.horizon() - (t + c * h))?);
                }
                PlanKind::Standard {
                    half_beta,
                    a: tab.a.clone(),
                    b: tab.b.clone(),
                }
            }
            Scheme::Exponential(e) => PlanKind::Exponential(exp_coefficients(
                e,
                schedule,
                t,
                h,
                self.simplified_a32,
            )?),
        };
        Ok(StepPlan { h, dim: model.dim(), frozen, stage_eval, kind })
    }

    /// Advances one particle across the planned step in place. On
    /// divergence returns the offending stage (the stage count denotes the
    /// final combination).
    pub fn apply_plan<F: FrozenEval>(
        &self,
        plan: &StepPlan<F>,
        x: &mut [f64],
        ws: &mut StepScratch,
    ) -> std::result::Result<(), usize> {
        let d = plan.dim;
        let s = plan.stage_eval.len();
        ws.ensure(d, s);
        match &plan.kind {
            PlanKind::Standard { half_beta, a, b } => {
                for j in 0..s {
                    ws.stage_x.copy_from_slice(x);
                    for (l, &ajl) in a[j].iter().enumerate() {
                        if ajl != 0.0 {
                            let kl = &ws.k[l * d..(l + 1) * d];
                            for i in 0..d {
                                ws.stage_x[i] += plan.h * ajl * kl[i];
                            }
                        }
                    }
                    // Split borrow: stage j writes k[j], reads stage_x.
                    let (stage_x, k, eval) = (&ws.stage_x, &mut ws.k, &mut ws.eval);
                    let kj = &mut k[j * d..(j + 1) * d];
                    plan.frozen[plan.stage_eval[j]].score_into(stage_x, kj, eval);
                    for i in 0..d {
                        kj[i] = half_beta[j] * (stage_x[i] + kj[i]);
                        if !kj[i].is_finite() {
                            return Err(j);
                        }
                    }
                }
                for j in 0..s {
                    let w = plan.h * b[j];
                    if w == 0.0 {
                        continue;
                    }
                    let kj = &ws.k[j * d..(j + 1) * d];
                    for i in 0..d {
                        x[i] += w * kj[i];
                    }
                }
            }
            PlanKind::Exponential(co) => {
                for j in 0..s {
                    for i in 0..d {
                        ws.stage_x[i] = co.e_stage[j] * x[i];
                    }
                    for (l, &alh) in co.a_h[j].iter().enumerate() {
                        if alh != 0.0 {
                            let kl = &ws.k[l * d..(l + 1) * d];
                            for i in 0..d {
                                ws.stage_x[i] += alh * kl[i];
                            }
                        }
                    }
                    let (stage_x, k, eval) = (&ws.stage_x, &mut ws.k, &mut ws.eval);
                    let kj = &mut k[j * d..(j + 1) * d];
                    plan.frozen[plan.stage_eval[j]].eps_into(stage_x, kj, eval);
                    if kj.iter().any(|v| !v.is_finite()) {
                        return Err(j);
                    }
                }
                for i in 0..d {
                    x[i] *= co.e_end;
                }
                for j in 0..s {
                    if co.b_h[j] == 0.0 {
                        continue;
                    }
                    let kj = &ws.k[j * d..(j + 1) * d];
                    for i in 0..d {
                        x[i] += co.b_h[j] * kj[i];
                    }
                }
            }
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(s);
        }
        Ok(())
    }

    /// Plans and applies a single step — the natural unit for local-order
    /// probes and exactness checks.
    pub fn step_once<M: ScoreModel>(
        &self,
        schedule: &VarianceSchedule,
        model: &M,
        grid: &TimeGrid,
        step_index: usize,
        x: &mut [f64],
    ) -> Result<()> {
        let plan = self.plan_step(schedule, model, grid, step_index)?;
        let mut ws = StepScratch::new();
        self.apply_plan(&plan, x, &mut ws)
            .map_err(|stage| Error::Diverged { step: step_index, stage })
    }
}

// ---------------------------------------------------------------------------
// Trajectories and ensembles
// ---------------------------------------------------------------------------

/// Outcome of integrating an ensemble: which particles survived, and where
/// the first divergence happened.
pub struct EnsembleRun {
    pub n_total: usize,
    /// Per-particle survival; diverged particles keep their last finite
    /// state but are excluded from statistics.
    pub alive: Vec<bool>,
    pub n_diverged: usize,
    /// `(step, stage, particle)` of the earliest divergence.
    pub first_divergence: Option<(usize, usize, usize)>,
}

/// Integrates a single state across the whole grid. Identical, bit for bit,
/// to what the ensemble driver does to one row.
pub fn solve_particle<M: ScoreModel>(
    integrator: &Integrator,
    schedule: &VarianceSchedule,
    model: &M,
    grid: &TimeGrid,
    x0: &[f64],
) -> Result<Vec<f64>> {
    let mut x = x0.to_vec();
    let mut ws = StepScratch::new();
    for i in 0..grid.n_steps() {
        let plan = integrator.plan_step(schedule, model, grid, i)?;
        integrator
            .apply_plan(&plan, &mut x, &mut ws)
            .map_err(|stage| Error::Diverged { step: i, stage })?;
    }
    Ok(x)
}

/// Integrates `particles` (flat row-major, `n × dim`) across the grid in
/// parallel, updating rows in place.
///
/// Each step is planned once (one score-field freeze per distinct stage
/// time) and the plan is applied to all live rows in fixed-size chunks, so
/// the result does not depend on the rayon thread count.
pub fn solve_ensemble<M: ScoreModel>(
    integrator: &Integrator,
    schedule: &VarianceSchedule,
    model: &M,
    grid: &TimeGrid,
    particles: &mut [f64],
) -> Result<EnsembleRun> {
    let dim = model.dim();
    assert_eq!(particles.len() % dim, 0, "particle buffer not a multiple of dim");
    let n = particles.len() / dim;
    let mut alive = vec![true; n];
    let mut first_divergence: Option<(usize, usize, usize)> = None;
    for step in 0..grid.n_steps() {
        let plan = integrator.plan_step(schedule, model, grid, step)?;
        // (stage, particle) of the first divergence in each chunk.
        let events: Vec<Option<(usize, usize)>> = particles
            .par_chunks_mut(ENSEMBLE_CHUNK * dim)
            .zip(alive.par_chunks_mut(ENSEMBLE_CHUNK))
            .enumerate()
            .map_init(StepScratch::new, |ws, (ci, (rows, live))| {
                let mut first: Option<(usize, usize)> = None;
                for (r, (row, a)) in rows.chunks_exact_mut(dim).zip(live.iter_mut()).enumerate() {
                    if !*a {
                        continue;
                    }
                    if let Err(stage) = integrator.apply_plan(&plan, row, ws) {
                        *a = false;
                        let particle = ci * ENSEMBLE_CHUNK + r;
                        if first.map_or(true, |(s, p)| (stage, particle) < (s, p)) {
                            first = Some((stage, particle));
                        }
                    }
                }
                first
            })
            .collect();
        if first_divergence.is_none() {
            first_divergence = events
                .into_iter()
                .flatten()
                .min()
                .map(|(stage, particle)| (step, stage, particle));
        }
    }
    let n_diverged = alive.iter().filter(|a| !**a).count();
    Ok(EnsembleRun { n_total: n, alive, n_diverged, first_divergence })
}
