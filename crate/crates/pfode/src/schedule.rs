//! Variance schedules for the forward noising process and the time
//! reparameterizations used by the integrators.
//!
//! The forward process runs in *forward time* `u ∈ [0, T]` and interpolates a
//! target sample toward an isotropic Gaussian: a sample `y₀` is scaled by
//! `λ(u)` while independent noise of scale `σ(u)` is mixed in, with
//! `λ(u)² + σ(u)² = 1` at all times. Both factors are determined by a rate
//! function `β(u) > 0`:
//!
//! ```text
//! λ(u) = exp(-½ ∫₀ᵘ β(s) ds),      σ(u) = sqrt(1 - λ(u)²).
//! ```
//!
//! Sampling integrates the reverse dynamics in *reverse time* `t ∈ [0, T]`,
//! which corresponds to forward time `u = T - t`. Two derived quantities
//! drive the exponential integrators:
//!
//! * `ζ(t) = ½ ∫_{T-t}^{T} β(s) ds` — the accumulated contraction rate; the
//!   linear part of the reverse dynamics has exact propagator `exp(Δζ)`.
//! * `α(t) = ζ(t) - ln σ(T-t)` — a strictly increasing clock against which
//!   the noise-prediction field varies slowly; it satisfies
//!   `dα/dt = β(T-t) / (2 σ(T-t)²) > 0`.
//!
//! All schedules here have closed-form integrals, so every quantity is
//! evaluated without quadrature. Small-`u` regimes use `exp_m1`-based
//! expressions to avoid cancellation.

use crate::error::{Error, Result};

/// Absolute slack (relative to `max(1, T)`) tolerated when checking that a
/// time lies in `[0, T]`; times within the slack are clamped. This absorbs
/// roundoff from grid arithmetic like `T - (T - t)`.
const TIME_DOMAIN_SLACK: f64 = 1e-12;

/// Schedule family selector. Construct through [`VarianceSchedule`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScheduleKind {
    /// Constant rate `β ≡ 2`, i.e. an Ornstein-Uhlenbeck process in which
    /// `λ(u) = e^{-u}`. With this normalization the reverse velocity field is
    /// exactly `x + score`.
    ConstantOu,
    /// Linearly increasing rate `β(u) = β_min + (u / T)(β_max - β_min)`.
    Linear { beta_min: f64, beta_max: f64 },
}

/// A noising schedule on a fixed horizon `[0, T]`.
///
/// Forward-time quantities ([`beta`](Self::beta), [`lambda`](Self::lambda),
/// [`sigma`](Self::sigma)) take `u ∈ [0, T]`; reverse-time quantities
/// ([`zeta`](Self::zeta), [`alpha`](Self::alpha)) take `t ∈ [0, T]` with
/// `u = T - t`.
#[derive(Debug, Clone, Copy)]
pub struct VarianceSchedule {
    kind: ScheduleKind,
    horizon: f64,
}

impl VarianceSchedule {
    /// Constant-rate schedule (`β ≡ 2`) on `[0, horizon]`.
    pub fn constant_ou(horizon: f64) -> Result<Self> {
        Self::new(ScheduleKind::ConstantOu, horizon)
    }

    /// Linear-rate schedule on `[0, horizon]` rising from `beta_min` at
    /// `u = 0` to `beta_max` at `u = horizon`.
    pub fn linear(beta_min: f64, beta_max: f64, horizon: f64) -> Result<Self> {
        if !(beta_min.is_finite() && beta_max.is_finite()) || beta_min <= 0.0 {
            return Err(Error::Domain(format!(
                "linear schedule needs finite rates with beta_min > 0, got [{beta_min}, {beta_max}]"
            )));
        }
        if beta_max < beta_min {
            return Err(Error::Domain(format!(
                "linear schedule needs beta_min <= beta_max, got [{beta_min}, {beta_max}]"
            )));
        }
        Self::new(ScheduleKind::Linear { beta_min, beta_max }, horizon)
    }

    fn new(kind: ScheduleKind, horizon: f64) -> Result<Self> {
        if !horizon.is_finite() || horizon <= 0.0 {
            return Err(Error::Domain(format!(
                "schedule horizon must be positive and finite, got {horizon}"
            )));
        }
        Ok(Self { kind, horizon })
    }

    /// The horizon `T`.
    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    /// The schedule family.
    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    /// Validates `t ∈ [0, T]` (with roundoff slack) and returns it clamped.
    fn checked_time(&self, t: f64, what: &str) -> Result<f64> {
        let slack = TIME_DOMAIN_SLACK * self.horizon.max(1.0);
        if !t.is_finite() || t < -slack || t > self.horizon + slack {
            return Err(Error::Domain(format!(
                "{what} time {t} outside [0, {}]",
                self.horizon
            )));
        }
        Ok(t.clamp(0.0, self.horizon))
    }

    /// Rate `β(u)` at forward time `u`.
    pub fn beta(&self, u: f64) -> Result<f64> {
        let u = self.checked_time(u, "forward")?;
        Ok(match self.kind {
            ScheduleKind::ConstantOu => 2.0,
            ScheduleKind::Linear { beta_min, beta_max } => {
                beta_min + (u / self.horizon) * (beta_max - beta_min)
            }
        })
    }

    /// `∫₀ᵘ β(s) ds`, in closed form. `u` is assumed validated.
    fn int_beta(&self, u: f64) -> f64 {
        match self.kind {
            ScheduleKind::ConstantOu => 2.0 * u,
            ScheduleKind::Linear { beta_min, beta_max } => {
                beta_min * u + (beta_max - beta_min) * u * u / (2.0 * self.horizon)
            }
        }
    }

    /// Signal scale `λ(u) = exp(-½ ∫₀ᵘ β)` at forward time `u`.
    pub fn lambda(&self, u: f64) -> Result<f64> {
        let u = self.checked_time(u, "forward")?;
        Ok((-0.5 * self.int_beta(u)).exp())
    }

    /// Noise scale `σ(u) = sqrt(1 - λ(u)²)` at forward time `u`.
    ///
    /// Computed as `sqrt(-expm1(-∫β))`, which stays accurate for small `u`
    /// where `λ ≈ 1`.
    pub fn sigma(&self, u: f64) -> Result<f64> {
        let u = self.checked_time(u, "forward")?;
        Ok(self.sigma_sq_unchecked(u).sqrt())
    }

    /// `σ(u)²`, computed without cancellation. `u` is assumed validated.
    fn sigma_sq_unchecked(&self, u: f64) -> f64 {
        -(-self.int_beta(u)).exp_m1()
    }

    /// `ln σ(u)`. Fails with [`Error::Singular`] where `σ(u) = 0`.
    fn ln_sigma_unchecked(&self, u: f64) -> Result<f64> {
        let s2 = self.sigma_sq_unchecked(u);
        if s2 <= 0.0 {
            return Err(Error::Singular(format!(
                "noise scale vanishes at forward time {u}"
            )));
        }
        Ok(0.5 * s2.ln())
    }

    /// Contraction exponent `ζ(t) = ½ ∫_{T-t}^{T} β(s) ds` at reverse time `t`.
    pub fn zeta(&self, t: f64) -> Result<f64> {
        let t = self.checked_time(t, "reverse")?;
        Ok(self.zeta_between_unchecked(0.0, t))
    }

    /// `ζ(t2) - ζ(t1) = ½ ∫_{T-t2}^{T-t1} β(s) ds` for reverse times
    /// `t1 <= t2`, in a form free of large-term cancellation.
    pub fn zeta_between(&self, t1: f64, t2: f64) -> Result<f64> {
        let t1 = self.checked_time(t1, "reverse")?;
        let t2 = self.checked_time(t2, "reverse")?;
        if t2 < t1 {
            return Err(Error::Domain(format!(
                "reverse-time interval is reversed: [{t1}, {t2}]"
            )));
        }
        Ok(self.zeta_between_unchecked(t1, t2))
    }

    fn zeta_between_unchecked(&self, t1: f64, t2: f64) -> f64 {
        match self.kind {
            ScheduleKind::ConstantOu => t2 - t1,
            ScheduleKind::Linear { beta_min, beta_max } => {
                // ∫_a^b β with a = T-t2, b = T-t1; b² - a² factors as
                // (t2 - t1)(2T - t1 - t2), avoiding cancellation for short
                // intervals.
                let dt = t2 - t1;
                0.5 * dt
                    * (beta_min
                        + (beta_max - beta_min) * (2.0 * self.horizon - t1 - t2)
                            / (2.0 * self.horizon))
            }
        }
    }

    /// Integrator clock `α(t) = ζ(t) - ln σ(T - t)` at reverse time `t`.
    ///
    /// Strictly increasing on `[0, T)`; fails with [`Error::Singular`] at
    /// `t = T` where the noise scale vanishes.
    pub fn alpha(&self, t: f64) -> Result<f64> {
        let t = self.checked_time(t, "reverse")?;
        Ok(self.zeta_between_unchecked(0.0, t) - self.ln_sigma_unchecked(self.horizon - t)?)
    }

    /// `α(t2) - α(t1)` for reverse times `t1 <= t2`, using the stable
    /// interval form of `ζ`.
    pub fn alpha_between(&self, t1: f64, t2: f64) -> Result<f64> {
        let t1 = self.checked_time(t1, "reverse")?;
        let t2 = self.checked_time(t2, "reverse")?;
        if t2 < t1 {
            return Err(Error::Domain(format!(
                "reverse-time interval is reversed: [{t1}, {t2}]"
            )));
        }
        let dz = self.zeta_between_unchecked(t1, t2);
        let dl = self.ln_sigma_unchecked(self.horizon - t2)?
            - self.ln_sigma_unchecked(self.horizon - t1)?;
        Ok(dz - dl)
    }

    /// `dα/dt = β(T-t) / (2 σ(T-t)²)` at reverse time `t`.
    pub fn alpha_rate(&self, t: f64) -> Result<f64> {
        let t = self.checked_time(t, "reverse")?;
        let u = self.horizon - t;
        let s2 = self.sigma_sq_unchecked(u);
        if s2 <= 0.0 {
            return Err(Error::Singular(format!(
                "alpha rate undefined at reverse time {t}: noise scale vanishes"
            )));
        }
        // β(u) without re-validating u.
        let beta = match self.kind {
            ScheduleKind::ConstantOu => 2.0,
            ScheduleKind::Linear { beta_min, beta_max } => {
                beta_min + (u / self.horizon) * (beta_max - beta_min)
            }
        };
        Ok(beta / (2.0 * s2))
    }
}

/// Below this magnitude the closed forms for `phi` lose too many digits to
/// cancellation, so a truncated power series takes over.
const PHI_SERIES_THRESHOLD: f64 = 1e-3;
/// Series length; at `|h| < 1e-3` the truncation error is below `1e-33`.
const PHI_SERIES_TERMS: usize = 10;

/// The exponential-integrator weight functions
/// `φ_k(h) = Σ_{j≥0} h^j / (j + k)!` for `k ∈ {1, 2, 3}`:
///
/// ```text
/// φ₁(h) = (e^h - 1) / h
/// φ₂(h) = (e^h - h - 1) / h²
/// φ₃(h) = (e^h - h²/2 - h - 1) / h³
/// ```
///
/// with `φ_k(0) = 1/k!`. They satisfy `φ_{k+1}(h) = (φ_k(h) - 1/k!) / h`.
/// For `|h| < 1e-3` the power series is summed directly; otherwise closed
/// forms built on `exp_m1` keep the evaluation accurate.
///
/// # Panics
///
/// Panics if `k` is not 1, 2, or 3.
pub fn phi(k: usize, h: f64) -> f64 {
    assert!((1..=3).contains(&k), "phi is defined for k in {{1,2,3}}, got {k}");
    if h.abs() < PHI_SERIES_THRESHOLD {
        // term_j = h^j / (j + k)!
        let mut factorial_k = 1.0;
        for i in 2..=k {
            factorial_k *= i as f64;
        }
        let mut term = 1.0 / factorial_k;
        let mut sum = term;
        for j in 1..PHI_SERIES_TERMS {
            term *= h / (j + k) as f64;
            sum += term;
        }
        sum
    } else {
        let em1 = h.exp_m1();
        match k {
            1 => em1 / h,
            2 => (em1 - h) / (h * h),
            _ => (em1 - h - 0.5 * h * h) / (h * h * h),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ou16() -> VarianceSchedule {
        VarianceSchedule::constant_ou(16.0).unwrap()
    }

    fn linear2000() -> VarianceSchedule {
        VarianceSchedule::linear(1e-4, 0.02, 2000.0).unwrap()
    }

    #[test]
    fn constant_ou_closed_forms() {
        let s = ou16();
        // λ(u) = e^{-u}; σ(1) = sqrt(1 - e^{-2}).
        assert!((s.lambda(1.0).unwrap() - (-1.0f64).exp()).abs() < 1e-15);
        assert!((s.sigma(1.0).unwrap() - (1.0 - (-2.0f64).exp()).sqrt()).abs() < 1e-15);
        assert_eq!(s.beta(7.3).unwrap(), 2.0);
        // ζ is the identity for β ≡ 2.
        assert!((s.zeta(5.25).unwrap() - 5.25).abs() < 1e-13);
    }

    #[test]
    fn linear_closed_forms() {
        let s = linear2000();
        // ∫₀ᵀ β of a linear ramp is T (β_min + β_max) / 2 = 20.1.
        let total: f64 = 2000.0 * (1e-4 + 0.02) / 2.0;
        assert!((s.lambda(2000.0).unwrap() - (-0.5 * total).exp()).abs() < 1e-15);
        assert!((s.zeta(2000.0).unwrap() - 0.5 * total).abs() / (0.5 * total) < 1e-14);
        assert!((s.beta(0.0).unwrap() - 1e-4).abs() < 1e-18);
        assert!((s.beta(2000.0).unwrap() - 0.02).abs() < 1e-16);
        assert!((s.beta(1000.0).unwrap() - (1e-4 + 0.02) / 2.0).abs() < 1e-17);
    }

    #[test]
    fn lambda_sigma_pythagorean_identity() {
        for s in [ou16(), linear2000()] {
            let t_max = s.horizon();
            for i in 0..=1000 {
                let u = t_max * i as f64 / 1000.0;
                let l = s.lambda(u).unwrap();
                let g = s.sigma(u).unwrap();
                assert!(
                    (l * l + g * g - 1.0).abs() < 1e-14,
                    "identity violated at u={u}: {}",
                    l * l + g * g - 1.0
                );
            }
        }
    }

    proptest! {
        #[test]
        fn lambda_sigma_identity_random_times(x in 0.0f64..1.0) {
            for s in [ou16(), linear2000()] {
                let u = x * s.horizon();
                let l = s.lambda(u).unwrap();
                let g = s.sigma(u).unwrap();
                prop_assert!((l * l + g * g - 1.0).abs() < 1e-14);
            }
        }

        #[test]
        fn zeta_between_matches_endpoint_difference(a in 0.05f64..0.95, b in 0.05f64..0.95) {
            for s in [ou16(), linear2000()] {
                let (t1, t2) = if a <= b { (a, b) } else { (b, a) };
                let (t1, t2) = (t1 * s.horizon(), t2 * s.horizon());
                let direct = s.zeta_between(t1, t2).unwrap();
                let diff = s.zeta(t2).unwrap() - s.zeta(t1).unwrap();
                prop_assert!((direct - diff).abs() < 1e-10 * (1.0 + diff.abs()));
            }
        }
    }

    #[test]
    fn zeta_derivative_is_half_beta_at_reversed_time() {
        let h = 1e-5;
        for s in [ou16(), linear2000()] {
            for frac in [0.1, 0.3, 0.5, 0.7, 0.9] {
                let t = frac * s.horizon();
                let fd = (s.zeta(t + h).unwrap() - s.zeta(t - h).unwrap()) / (2.0 * h);
                let expect = 0.5 * s.beta(s.horizon() - t).unwrap();
                assert!(
                    (fd - expect).abs() / expect.abs() < 1e-6,
                    "dζ/dt mismatch at t={t}: fd={fd}, closed={expect}"
                );
            }
        }
    }

    #[test]
    fn alpha_matches_log_ratio_identity() {
        // From the definitions, e^{α(t)} = λ(T-t) / (λ(T) σ(T-t)).
        for s in [ou16(), linear2000()] {
            let lam_t = s.lambda(s.horizon()).unwrap();
            for frac in [0.05, 0.25, 0.5, 0.75, 0.95] {
                let t = frac * s.horizon();
                let u = s.horizon() - t;
                let expect = s.lambda(u).unwrap() / (lam_t * s.sigma(u).unwrap());
                let got = s.alpha(t).unwrap().exp();
                assert!(
                    ((got - expect) / expect).abs() < 1e-12,
                    "e^α mismatch at t={t}: {got} vs {expect}"
                );
            }
        }
    }

    #[test]
    fn alpha_vanishes_at_reverse_time_zero() {
        // α(0) = -ln σ(T) ≈ ½ e^{-∫β} for large horizons: ~6.3e-15 for the
        // constant schedule on [0, 16].
        let a0 = ou16().alpha(0.0).unwrap();
        assert!(a0 > 0.0 && a0 < 1e-13, "alpha(0) = {a0}");
    }

    #[test]
    fn alpha_derivative_matches_rate() {
        let h = 1e-5;
        for s in [ou16(), linear2000()] {
            for frac in [0.1, 0.3, 0.5, 0.7, 0.9, 0.98] {
                let t = frac * s.horizon();
                let fd = (s.alpha(t + h).unwrap() - s.alpha(t - h).unwrap()) / (2.0 * h);
                let rate = s.alpha_rate(t).unwrap();
                assert!(
                    (fd - rate).abs() / rate.abs() < 1e-6,
                    "dα/dt mismatch at t={t}: fd={fd}, rate={rate}"
                );
                assert!(rate > 0.0);
            }
        }
    }

    #[test]
    fn alpha_strictly_increasing() {
        // Sampled up to a small margin below T, where α diverges anyway.
        let cases = [(ou16(), 0.1), (linear2000(), 15.625)];
        for (s, tau) in cases {
            let t_end = s.horizon() - tau;
            let mut prev = s.alpha(0.0).unwrap();
            for i in 1..=1000 {
                let t = t_end * i as f64 / 1000.0;
                let a = s.alpha(t).unwrap();
                assert!(a > prev, "alpha not increasing at t={t}");
                prev = a;
            }
        }
    }

    #[test]
    fn alpha_between_matches_endpoint_difference() {
        for s in [ou16(), linear2000()] {
            let pairs = [(0.1, 0.2), (0.25, 0.7), (0.5, 0.99)];
            for (a, b) in pairs {
                let (t1, t2) = (a * s.horizon(), b * s.horizon());
                let direct = s.alpha_between(t1, t2).unwrap();
                let diff = s.alpha(t2).unwrap() - s.alpha(t1).unwrap();
                assert!((direct - diff).abs() < 1e-10 * (1.0 + diff.abs()));
            }
        }
    }

    #[test]
    fn domain_violations_are_rejected() {
        let s = ou16();
        assert!(s.beta(-1.0).is_err());
        assert!(s.lambda(17.0).is_err());
        assert!(s.zeta(f64::NAN).is_err());
        assert!(s.zeta_between(3.0, 1.0).is_err());
        // σ(0) = 0 makes α singular at reverse time T.
        assert!(matches!(s.alpha(16.0), Err(Error::Singular(_))));
        assert!(VarianceSchedule::constant_ou(0.0).is_err());
        assert!(VarianceSchedule::linear(0.0, 0.02, 10.0).is_err());
        assert!(VarianceSchedule::linear(0.1, 0.05, 10.0).is_err());
        assert!(VarianceSchedule::linear(1e-4, 0.02, f64::INFINITY).is_err());
    }

    #[test]
    fn phi_closed_form_values() {
        let e = std::f64::consts::E;
        assert!((phi(1, 1.0) - (e - 1.0)).abs() < 1e-15);
        assert!((phi(2, 1.0) - (e - 2.0)).abs() < 1e-15);
        assert!((phi(3, 1.0) - (e - 2.5)).abs() < 1e-14);
        assert!((phi(1, -1.0) - (1.0 - (-1.0f64).exp())).abs() < 1e-15);
        assert_eq!(phi(1, 0.0), 1.0);
        assert_eq!(phi(2, 0.0), 0.5);
        assert!((phi(3, 0.0) - 1.0 / 6.0).abs() < 1e-16);
    }

    #[test]
    fn phi_recurrence_across_branches() {
        // φ_{k+1}(h) = (φ_k(h) - 1/k!) / h, exercised on both sides of the
        // series/closed-form switch. Checked in the rearranged form
        // φ_k = h φ_{k+1} + 1/k!, which stays well-conditioned at h = 1e-8
        // where the quotient form would lose eight digits to cancellation.
        let inv_factorial = [1.0, 1.0, 0.5];
        for &h in &[1e-8, -1e-8, 1e-3, -1e-3, 1.0, -1.0, 10.0, -10.0] {
            for k in 1..=2usize {
                let lhs = phi(k, h);
                let rhs = h * phi(k + 1, h) + inv_factorial[k];
                assert!(
                    (lhs - rhs).abs() / lhs.abs() < 1e-10,
                    "recurrence failed at k={k}, h={h}: {lhs} vs {rhs}"
                );
            }
        }
    }

    #[test]
    fn phi_continuous_at_series_threshold() {
        for k in 1..=3usize {
            let below = phi(k, PHI_SERIES_THRESHOLD * (1.0 - 1e-9));
            let above = phi(k, PHI_SERIES_THRESHOLD * (1.0 + 1e-9));
            assert!(
                (below - above).abs() / below.abs() < 1e-8,
                "phi_{k} jumps across the series switch: {below} vs {above}"
            );
        }
    }

    #[test]
    #[should_panic(expected = "phi is defined")]
    fn phi_rejects_unsupported_order() {
        phi(4, 0.5);
    }
}
