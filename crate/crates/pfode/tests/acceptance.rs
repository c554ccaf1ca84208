//! Acceptance gate: one test per shipping criterion, each printing a single
//! `ACCEPTANCE <n> <name>: PASS|FAIL — <measured numbers>` line before
//! asserting, so a red run still shows every measured value.
//!
//! Tolerances, slope windows, and experiment parameters are pinned as consts
//! here. Noise floors for the order fits use the pre-registered rule
//! `2.5 · σ_τ / (√J · max(‖m_τ‖, 1))` evaluated from the analytic target
//! moments at the measurement time — never from the observed errors.

use std::time::Instant;

use pfode::harness::{render_csv, Experiment, ExperimentConfig, StudyKind, StudyResult};
use pfode::metrics::{
    self, bandwidth, default_grid, fit_order, grid_mass, kde_on_grid, tv_error, BandwidthRule,
};
use pfode::schedule::{phi, VarianceSchedule};
use pfode::solver::{ButcherTableau, ExpRkScheme, Integrator, Scheme, TimeGrid};
use pfode::target::{staircase, EvalScratch, FrozenEval, GaussianMixture, ScoreField, ScoreModel};
use pfode::{Error, Result};
use serde_json::{json, Value};

/// Every ensemble in this suite draws from the same master seed.
const PARTICLE_SEED: u64 = 20260822;
/// Pre-registered CLT multiple for the order-fit noise floor.
const FLOOR_MULTIPLE: f64 = 2.5;
/// Particle counts: the convergence/score-error experiments, and the cheaper
/// high-dimension one.
const ENSEMBLE_SIZE: usize = 200_000;
const ENSEMBLE_SIZE_HIGH_D: usize = 20_000;

/// First-order slope window (RK1, ExpRK1).
const ORDER1_WINDOW: (f64, f64) = (0.7, 1.3);
/// Second-order slope window (RK2, ExpRK2).
const ORDER2_WINDOW: (f64, f64) = (1.6, 2.4);
/// Third-order slope window (ExpRK3).
const ORDER3_WINDOW: (f64, f64) = (2.5, 3.5);
/// RK4 has a one-sided requirement.
const ORDER4_MIN: f64 = 3.3;

fn floor_from_moments(mix: &GaussianMixture, schedule: &VarianceSchedule, u: f64, j: usize) -> f64 {
    let (mean, cov) = mix.moments(schedule, u).expect("analytic moments");
    let d = mean.len();
    let trace: f64 = (0..d).map(|i| cov[i * d + i]).sum();
    let mean_norm = mean.iter().map(|m| m * m).sum::<f64>().sqrt();
    FLOOR_MULTIPLE * trace.sqrt() / ((j as f64).sqrt() * mean_norm.max(1.0))
}

/// Builds the experiment twice: once to get the analytic moments at the
/// measurement time, then again with the pre-registered floor pinned into
/// the config, so the harness's own fits use it too.
fn experiment_with_floor(mut cfg: Value) -> (Experiment, f64) {
    let probe = Experiment::from_config(
        ExperimentConfig::from_json(&cfg.to_string()).expect("config parses"),
    )
    .expect("config validates");
    let tau = cfg["grid"]["tau"].as_f64().expect("tau");
    let j = cfg["n_particles"].as_u64().expect("n_particles") as usize;
    let floor = floor_from_moments(probe.mixture(), probe.schedule(), tau, j);
    cfg["fit_floor"] = json!(floor);
    let exp = Experiment::from_config(
        ExperimentConfig::from_json(&cfg.to_string()).expect("config parses"),
    )
    .expect("config validates");
    (exp, floor)
}

/// The 1-D three-mode target for the standard-RK experiments: asymmetric
/// weights and well widths so the ensemble mean carries visible
/// discretization bias (symmetric geometries hide it by cancellation).
fn three_mode_target() -> Value {
    json!({"kind": "explicit", "dim": 1, "components": [
        {"weight": 0.5, "mean": [-1.6], "cov": [[0.12]]},
        {"weight": 0.3, "mean": [0.5],  "cov": [[0.08]]},
        {"weight": 0.2, "mean": [2.0],  "cov": [[0.15]]},
    ]})
}

/// Same geometry with halved variances for the exponential-RK experiments:
/// those schemes integrate the linear drift exactly, so they need a sharper
/// score field before their bias clears the Monte Carlo floor.
fn sharp_three_mode_target() -> Value {
    json!({"kind": "explicit", "dim": 1, "components": [
        {"weight": 0.5, "mean": [-1.6], "cov": [[0.06]]},
        {"weight": 0.3, "mean": [0.5],  "cov": [[0.04]]},
        {"weight": 0.2, "mean": [2.0],  "cov": [[0.075]]},
    ]})
}

fn rk_lane_config(scheme: &str, score_error: Value) -> Value {
    json!({
        "schema_version": 1,
        "schedule": {"kind": "constant_ou", "horizon": 16.0},
        "grid": {"n_base": 512, "tau": 0.0, "n_steps": [8, 16, 32, 64, 128],
                 "strict_alignment": true},
        "schemes": [scheme],
        "target": three_mode_target(),
        "score_error": score_error,
        "n_particles": ENSEMBLE_SIZE,
        "seed": PARTICLE_SEED,
    })
}

/// The linear-schedule lane stops τ = 4Δt short of the horizon. Strict stage
/// alignment is off: the window is 508 lattice cells and 508 = 2²·127 admits
/// almost no divisors, while the analytic score is evaluable anywhere.
fn exp_lane_config(scheme: &str, n_steps: &[usize], score_error: Value) -> Value {
    json!({
        "schema_version": 1,
        "schedule": {"kind": "linear", "beta_min": 1e-4, "beta_max": 0.02, "horizon": 2000.0},
        "grid": {"n_base": 512, "tau": 15.625, "n_steps": n_steps,
                 "strict_alignment": false},
        "schemes": [scheme],
        "target": sharp_three_mode_target(),
        "score_error": score_error,
        "n_particles": ENSEMBLE_SIZE,
        "seed": PARTICLE_SEED,
    })
}

fn slope_str(fit: &Result<f64>) -> String {
    match fit {
        Ok(s) => format!("{s:.3}"),
        Err(e) => format!("unfit ({e})"),
    }
}

fn errors_str(runs: &StudyResult) -> String {
    runs.runs
        .iter()
        .map(|r| format!("{:.2e}", r.rel_mean_error))
        .collect::<Vec<_>>()
        .join(" ")
}

fn in_window(fit: &Result<f64>, lo: f64, hi: f64) -> bool {
    matches!(fit, Ok(s) if (lo..=hi).contains(s))
}

fn report(number: u32, name: &str, pass: bool, details: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    println!("ACCEPTANCE {number} {name}: {verdict} — {details}");
}

/// Runs one single-scheme sweep and fits the rel-mean slope against the
/// pre-registered floor, returning the fit, the raw runs, and the floor.
fn sweep_and_fit(cfg: Value) -> (Result<f64>, StudyResult, f64) {
    let (exp, floor) = experiment_with_floor(cfg);
    let result = exp.run_all().expect("sweep runs");
    let points: Vec<(f64, f64)> = result.runs.iter().map(|r| (r.h, r.rel_mean_error)).collect();
    let fit = fit_order(&points, floor);
    (fit, result, floor)
}

#[test]
fn criterion_1_rk_convergence_orders() {
    let started = Instant::now();
    let fixed_eps = json!({"mode": "fixed", "eps": 1e-6});
    let (fit1, runs1, floor) = sweep_and_fit(rk_lane_config("RK1", fixed_eps.clone()));
    let (fit2, runs2, _) = sweep_and_fit(rk_lane_config("RK2", fixed_eps.clone()));
    let (fit4, runs4, _) = sweep_and_fit(rk_lane_config("RK4", fixed_eps));
    let elapsed = started.elapsed().as_secs_f64();

    let ok1 = in_window(&fit1, ORDER1_WINDOW.0, ORDER1_WINDOW.1);
    let ok2 = in_window(&fit2, ORDER2_WINDOW.0, ORDER2_WINDOW.1);
    let ok4 = matches!(fit4, Ok(s) if s >= ORDER4_MIN);
    let time_ok = elapsed < 300.0;
    let details = format!(
        "RK1 slope {} (want {:?}), RK2 {} (want {:?}), RK4 {} (want >= {ORDER4_MIN}); \
         floor {floor:.2e}; rel-mean errors per octave RK1 [{}], RK2 [{}], RK4 [{}]; \
         {elapsed:.0}s (cap 300s)",
        slope_str(&fit1),
        ORDER1_WINDOW,
        slope_str(&fit2),
        ORDER2_WINDOW,
        slope_str(&fit4),
        errors_str(&runs1),
        errors_str(&runs2),
        errors_str(&runs4),
    );
    report(1, "standard-rk-convergence-orders", ok1 && ok2 && ok4 && time_ok, &details);
    assert!(ok1 && ok2 && ok4 && time_ok, "{details}");
}

#[test]
fn criterion_2_exprk_convergence_orders() {
    let fixed_eps = json!({"mode": "fixed", "eps": 1e-6});
    // Step counts sample each scheme's asymptotic window: coarser steps are
    // pre-asymptotic for ExpRK1, while ExpRK3's third-order branch lives
    // entirely at very coarse steps (it is plateau-flat by n = 6).
    let plans: [(&str, &[usize], (f64, f64)); 3] = [
        ("ExpRK1", &[14, 20, 28, 40], ORDER1_WINDOW),
        ("ExpRK2", &[6, 7, 8, 9, 10], ORDER2_WINDOW),
        ("ExpRK3", &[2, 3, 4, 5], ORDER3_WINDOW),
    ];
    let mut all_ok = true;
    let mut details = Vec::new();
    for (scheme, steps, window) in plans {
        let (exp, floor) =
            experiment_with_floor(exp_lane_config(scheme, steps, fixed_eps.clone()));
        let study = exp.run_study(StudyKind::Convergence).expect("convergence study");
        let slope = study.summaries[0].fitted_order;
        let ok = (window.0..=window.1).contains(&slope);
        all_ok &= ok;
        details.push(format!(
            "{scheme} slope {slope:.3} (want {window:?}, floor {floor:.2e}, errors [{}])",
            errors_str(&study)
        ));
    }
    let details = details.join("; ");
    report(2, "exponential-rk-convergence-orders", all_ok, &details);
    assert!(all_ok, "{details}");
}

#[test]
fn criterion_3_score_error_scaling() {
    let sweep = json!({"mode": "sweep", "values": [0.0, 1e-3, 3e-3, 1e-2, 3e-2, 1e-1]});
    // RK4 midpoint stages need an even step ratio, so the 512-step run sits
    // on a 1024-cell lattice. The eps = 0 row is the floor reference and is
    // excluded from the fit by its zero abscissa.
    let mut cfg = rk_lane_config("RK4", sweep);
    cfg["grid"]["n_base"] = json!(1024);
    cfg["grid"]["n_steps"] = json!([512]);
    let (exp, floor) = experiment_with_floor(cfg);
    let study = exp.run_study(StudyKind::ScoreError).expect("score-error study");
    let slope = study.summaries[0].fitted_order;
    let ok = (0.75..=1.25).contains(&slope);
    let pairs = study
        .runs
        .iter()
        .map(|r| format!("eps {:.0e} -> {:.2e}", r.eps_score, r.rel_mean_error))
        .collect::<Vec<_>>()
        .join(", ");
    let details =
        format!("rel-mean vs eps slope {slope:.3} (want [0.75, 1.25], floor {floor:.2e}); {pairs}");
    report(3, "score-error-scaling", ok, &details);
    assert!(ok, "{details}");
}

#[test]
fn criterion_4_order_matched_score_error() {
    // eps = c·H^p per scheme. Each constant is sized so the injected error
    // contributes visibly (~10-25% at the coarsest step) without dominating;
    // the response to the perturbation is strongly super-linear at very
    // coarse steps, which is why the exponential-lane constants are tiny.
    struct Plan {
        scheme: &'static str,
        exp_lane: bool,
        steps: &'static [usize],
        constant: f64,
        window: (f64, f64),
    }
    let plans = [
        Plan { scheme: "RK1", exp_lane: false, steps: &[8, 16, 32, 64, 128], constant: 1.25e-2, window: ORDER1_WINDOW },
        Plan { scheme: "RK2", exp_lane: false, steps: &[8, 16, 32, 64, 128], constant: 5e-4, window: ORDER2_WINDOW },
        Plan { scheme: "RK4", exp_lane: false, steps: &[8, 16, 32, 64, 128], constant: 1.875e-4, window: (ORDER4_MIN, f64::INFINITY) },
        Plan { scheme: "ExpRK1", exp_lane: true, steps: &[14, 20, 28, 40], constant: 5e-6, window: ORDER1_WINDOW },
        Plan { scheme: "ExpRK2", exp_lane: true, steps: &[6, 7, 8, 9], constant: 1e-9, window: ORDER2_WINDOW },
        Plan { scheme: "ExpRK3", exp_lane: true, steps: &[3, 4, 5], constant: 1e-14, window: ORDER3_WINDOW },
    ];
    let mut all_ok = true;
    let mut details = Vec::new();
    for plan in &plans {
        let score_error = json!({"mode": "order_matched", "constant": plan.constant});
        let cfg = if plan.exp_lane {
            exp_lane_config(plan.scheme, plan.steps, score_error)
        } else {
            let mut cfg = rk_lane_config(plan.scheme, score_error);
            cfg["grid"]["n_steps"] = json!(plan.steps);
            cfg
        };
        let (fit, runs, floor) = sweep_and_fit(cfg);
        let ok = in_window(&fit, plan.window.0, plan.window.1);
        all_ok &= ok;
        details.push(format!(
            "{} slope {} (want [{}, {}], c {:.3e}, floor {floor:.2e}, errors [{}])",
            plan.scheme,
            slope_str(&fit),
            plan.window.0,
            plan.window.1,
            plan.constant,
            errors_str(&runs)
        ));
    }
    let details = details.join("; ");
    report(4, "order-matched-score-error", all_ok, &details);
    assert!(all_ok, "{details}");
}

#[test]
fn criterion_5_dimension_independence() {
    let mut slopes = Vec::new();
    let mut errors: Vec<Vec<f64>> = Vec::new();
    let mut details = Vec::new();
    for (dim, mixture_seed) in [(8, 7u64), (32, 11u64)] {
        let cfg = json!({
            "schema_version": 1,
            "schedule": {"kind": "constant_ou", "horizon": 16.0},
            "grid": {"n_base": 512, "tau": 0.0, "n_steps": [8, 16, 32],
                     "strict_alignment": true},
            "schemes": ["RK4"],
            "target": {"kind": "random_modes", "dim": dim, "modes": 5, "seed": mixture_seed},
            "score_error": {"mode": "order_matched", "constant": 1.875e-4},
            "n_particles": ENSEMBLE_SIZE_HIGH_D,
            "seed": PARTICLE_SEED,
        });
        let (fit, runs, floor) = sweep_and_fit(cfg);
        details.push(format!(
            "d={dim} slope {} (want >= {ORDER4_MIN}, floor {floor:.2e}, errors [{}])",
            slope_str(&fit),
            errors_str(&runs)
        ));
        errors.push(runs.runs.iter().map(|r| r.rel_mean_error).collect());
        slopes.push(fit);
    }
    let slopes_ok = slopes.iter().all(|f| matches!(f, Ok(s) if *s >= ORDER4_MIN));
    let worst_ratio = errors[0]
        .iter()
        .zip(&errors[1])
        .map(|(a, b)| (a / b).max(b / a))
        .fold(0.0f64, f64::max);
    let ratio_ok = worst_ratio < 3.0;
    let details = format!(
        "{}; worst matched-(H, eps) rel-mean ratio between dims {worst_ratio:.2} (want < 3)",
        details.join("; ")
    );
    report(5, "dimension-independence", slopes_ok && ratio_ok, &details);
    assert!(slopes_ok && ratio_ok, "{details}");
}

// ---------------------------------------------------------------------------
// Local-order and exactness probes (single steps, no ensembles)
// ---------------------------------------------------------------------------

/// Score field that is the same constant everywhere: under the constant-β
/// schedule the velocity is y + c, so the one-step truth is closed-form.
struct ConstantScore {
    schedule: VarianceSchedule,
    value: f64,
}

struct FrozenConstant {
    score: f64,
    sigma: f64,
}

impl ScoreModel for ConstantScore {
    type Frozen = FrozenConstant;

    fn dim(&self) -> usize {
        1
    }

    fn freeze(&self, t: f64) -> Result<FrozenConstant> {
        Ok(FrozenConstant {
            score: self.value,
            sigma: self.schedule.sigma(self.schedule.horizon() - t)?,
        })
    }
}

impl FrozenEval for FrozenConstant {
    fn dim(&self) -> usize {
        1
    }

    fn score_into(&self, _x: &[f64], out: &mut [f64], _scratch: &mut EvalScratch) {
        out[0] = self.score;
    }

    fn eps_into(&self, _x: &[f64], out: &mut [f64], _scratch: &mut EvalScratch) {
        out[0] = self.score * self.sigma;
    }
}

#[test]
fn criterion_6_richardson_local_order() {
    let schedule = VarianceSchedule::constant_ou(16.0).unwrap();
    let model = ConstantScore { schedule, value: 0.7 };
    let y0 = 0.3;
    // v = y + 0.7, so one exact step of size h from y0 is (y0 + 0.7)e^h - 0.7.
    let exact = |h: f64| (y0 + model.value) * h.exp() - model.value;

    let tableaus = [
        ButcherTableau::rk1(),
        ButcherTableau::rk2(),
        ButcherTableau::rk3(),
        ButcherTableau::rk4(),
    ];
    let mut all_ok = true;
    let mut details = Vec::new();
    for tableau in tableaus {
        let p = tableau.order() as f64;
        let name = tableau.name();
        let integrator = Integrator::new(Scheme::Standard(tableau));
        let mut one_step_error = |n_steps: usize| {
            let grid =
                TimeGrid::new(&schedule, 0.0, 256, n_steps, integrator.scheme(), false).unwrap();
            let mut x = [y0];
            integrator.step_once(&schedule, &model, &grid, 0, &mut x).unwrap();
            (x[0] - exact(grid.h())).abs()
        };
        // h = 16/256 and h/2: the local error should shrink by ~2^(p+1).
        let ratio = (one_step_error(256) / one_step_error(512)).log2();
        let ok = (p + 0.6..=p + 1.4).contains(&ratio);
        all_ok &= ok;
        details.push(format!("{name} log2 ratio {ratio:.2} (want [{:.1}, {:.1}])", p + 0.6, p + 1.4));
    }
    let details = details.join("; ");
    report(6, "richardson-local-order", all_ok, &details);
    assert!(all_ok, "{details}");
}

/// Noise-prediction field that is affine in the integrator clock α:
/// `ε(α) = a + b (α - α_ref)`. With b = 0 it is constant.
struct AlphaAffineEps {
    schedule: VarianceSchedule,
    a: f64,
    b: f64,
    alpha_ref: f64,
}

impl ScoreModel for AlphaAffineEps {
    type Frozen = FrozenConstant;

    fn dim(&self) -> usize {
        1
    }

    fn freeze(&self, t: f64) -> Result<FrozenConstant> {
        let sigma = self.schedule.sigma(self.schedule.horizon() - t)?;
        let eps = self.a + self.b * (self.schedule.alpha(t)? - self.alpha_ref);
        Ok(FrozenConstant { score: eps / sigma, sigma })
    }
}

#[test]
fn criterion_7_exprk_exactness_oracles() {
    let schedule = VarianceSchedule::linear(1e-4, 0.02, 2000.0).unwrap();
    // One step from t0 = 250 to t1 = 500 on an 8-step grid.
    let (t0, step_index, n_steps) = (250.0, 1usize, 8usize);
    let y0 = 0.4;
    let dz = schedule.zeta_between(t0, t0 + 250.0).unwrap();
    let da = schedule.alpha_between(t0, t0 + 250.0).unwrap();
    let sigma0 = schedule.sigma(schedule.horizon() - t0).unwrap();

    // Exact Duhamel update for ε(α) = a + b(α - α0):
    //   Y1 = e^{Δζ} [Y0 + σ0 (a (1 - e^{-Δα}) + b (1 - (1 + Δα) e^{-Δα}))]
    let duhamel = |a: f64, b: f64| {
        dz.exp()
            * (y0 + sigma0 * (a * (1.0 - (-da).exp()) + b * (1.0 - (1.0 + da) * (-da).exp())))
    };

    let run = |scheme: ExpRkScheme, a: f64, b: f64| -> f64 {
        let model = AlphaAffineEps {
            schedule,
            a,
            b,
            alpha_ref: schedule.alpha(t0).unwrap(),
        };
        let integrator = Integrator::new(Scheme::Exponential(scheme));
        let grid =
            TimeGrid::new(&schedule, 0.0, 8, n_steps, integrator.scheme(), false).unwrap();
        let mut x = [y0];
        integrator.step_once(&schedule, &model, &grid, step_index, &mut x).unwrap();
        let exact = duhamel(a, b);
        ((x[0] - exact) / exact).abs()
    };

    let rel1 = run(ExpRkScheme::order1(), 0.8, 0.0);
    let rel2 = run(ExpRkScheme::order2(1.0).unwrap(), 0.6, -0.35);
    let ok1 = rel1 <= 1e-12;
    let ok2 = rel2 <= 1e-10;
    let details = format!(
        "constant field: ExpRK1 vs closed-form rel {rel1:.2e} (want <= 1e-12); \
         affine-in-clock field: ExpRK2 rel {rel2:.2e} (want <= 1e-10)"
    );
    report(7, "exponential-integrator-exactness", ok1 && ok2, &details);
    assert!(ok1 && ok2, "{details}");
}

#[test]
fn criterion_8_gaussian_tracking() {
    let mean = [1.0, -0.5];
    let cov = [0.8, 0.3, 0.3, 0.5];
    let j = 100_000usize;
    let cfg = json!({
        "schema_version": 1,
        "schedule": {"kind": "constant_ou", "horizon": 16.0},
        "grid": {"n_base": 512, "tau": 0.0, "n_steps": [128], "strict_alignment": true},
        "schemes": ["RK4"],
        "target": {"kind": "explicit", "dim": 2, "components": [
            {"weight": 1.0, "mean": mean, "cov": [[cov[0], cov[1]], [cov[2], cov[3]]]},
        ]},
        "score_error": {"mode": "fixed", "eps": 0.0},
        "n_particles": j,
        "seed": PARTICLE_SEED,
    });
    let exp = Experiment::from_config(
        ExperimentConfig::from_json(&cfg.to_string()).unwrap(),
    )
    .unwrap();
    let run = &exp.run_all().unwrap().runs[0];

    // rel_mean_error is ‖Δm‖ / max(‖m‖, 1); undo the scaling to compare the
    // absolute mean displacement against CLT-plus-discretization slack.
    let mean_norm = (mean[0] * mean[0] + mean[1] * mean[1]).sqrt();
    let abs_mean_err = run.rel_mean_error * mean_norm.max(1.0);
    let stderr = ((cov[0] + cov[3]) / j as f64).sqrt();
    let h = 16.0 / 128.0;
    let mean_tol = 3.0 * (stderr + 10.0 * h.powi(4));
    let cov_tol = 0.02;

    let ok_mean = abs_mean_err <= mean_tol;
    let ok_cov = run.rel_cov_error <= cov_tol;
    let details = format!(
        "mean displacement {abs_mean_err:.2e} (want <= {mean_tol:.2e}); \
         covariance rel Frobenius error {:.2e} (want <= {cov_tol:.2e})",
        run.rel_cov_error
    );
    report(8, "analytic-gaussian-tracking", ok_mean && ok_cov, &details);
    assert!(ok_mean && ok_cov, "{details}");
}

#[test]
fn criterion_9_invariant_suites() {
    let mut families = Vec::new();

    // Schedule identities: λ² + σ² = 1, the clock rate dα/dt, and the
    // rearranged φ recurrence φ_k = h·φ_{k+1} + 1/k!.
    {
        let schedules = [
            VarianceSchedule::constant_ou(16.0).unwrap(),
            VarianceSchedule::linear(1e-4, 0.02, 2000.0).unwrap(),
        ];
        let mut ok = true;
        for s in &schedules {
            let horizon = s.horizon();
            for i in 1..40 {
                let u = horizon * i as f64 / 40.0;
                let (l, g) = (s.lambda(u).unwrap(), s.sigma(u).unwrap());
                ok &= (l * l + g * g - 1.0).abs() <= 1e-12;

                let t = horizon - u;
                let e = 1e-6 * horizon;
                if t > e && t + e < horizon {
                    let fd = (s.alpha(t + e).unwrap() - s.alpha(t - e).unwrap()) / (2.0 * e);
                    let rate = s.alpha_rate(t).unwrap();
                    ok &= ((fd - rate) / rate).abs() <= 1e-5;
                }
            }
        }
        let factorial = [1.0, 1.0, 2.0, 6.0];
        for h in [-5.0, -0.1, -1e-3, -1e-8, 1e-8, 1e-3, 0.1, 5.0] {
            for k in 1..=3usize {
                let lhs = phi(k, h);
                let rhs = h * phi(k + 1, h) + 1.0 / factorial[k];
                ok &= ((lhs - rhs) / lhs).abs() <= 1e-10;
            }
        }
        families.push(("schedule-identities", ok));
    }

    // Score equals the gradient of the log marginal density (1-D check
    // against a central difference of the analytic density).
    {
        let mix = GaussianMixture::new(
            1,
            serde_json::from_value(three_mode_target()["components"].clone())
                .map(component_vec)
                .unwrap(),
        )
        .unwrap();
        let schedule = VarianceSchedule::constant_ou(16.0).unwrap();
        let u = 3.0;
        let field = ScoreField::new(mix.clone(), schedule, 0.0).unwrap();
        let frozen = field.freeze(schedule.horizon() - u).unwrap();
        let mut scratch = EvalScratch::new();
        let mut ok = true;
        for y in [-2.1, -0.3, 0.9, 2.4] {
            let e = 1e-5;
            let fd = (mix.marginal_density(&schedule, u, y + e).unwrap().ln()
                - mix.marginal_density(&schedule, u, y - e).unwrap().ln())
                / (2.0 * e);
            let mut s = [0.0];
            frozen.score_into(&[y], &mut s, &mut scratch);
            ok &= ((fd - s[0]) / s[0]).abs() <= 1e-5;
        }
        families.push(("score-vs-finite-difference", ok));
    }

    // The perturbation profile: continuous, C¹, curvature exactly ±1
    // alternating cell to cell.
    {
        let mut ok = true;
        for knot in [-2.0f64, -1.0, 0.0, 1.0, 2.0, 3.0] {
            let e = 1e-7;
            ok &= (staircase(knot + e) - staircase(knot - e)).abs() <= 1e-6;
            let left = (staircase(knot) - staircase(knot - e)) / e;
            let right = (staircase(knot + e) - staircase(knot)) / e;
            ok &= (left - right).abs() <= 1e-5;
        }
        for (mid, want) in [(0.5, 1.0), (1.5, -1.0), (2.5, 1.0), (-1.5, 1.0), (-0.5, -1.0)] {
            let e = 1e-4;
            let dd = (staircase(mid + e) - 2.0 * staircase(mid) + staircase(mid - e)) / (e * e);
            ok &= (dd - want).abs() <= 1e-4;
        }
        families.push(("perturbation-profile", ok));
    }

    // KDE mass and total-variation identity/symmetry.
    {
        let mix = GaussianMixture::new(
            1,
            serde_json::from_value(three_mode_target()["components"].clone())
                .map(component_vec)
                .unwrap(),
        )
        .unwrap();
        let schedule = VarianceSchedule::constant_ou(16.0).unwrap();
        let samples = mix.sample(PARTICLE_SEED, 20_000);
        let bw = bandwidth(&samples, BandwidthRule::RobustMin).unwrap();
        let grid = default_grid(&samples, bw, metrics::DEFAULT_GRID_POINTS).unwrap();
        let kde = kde_on_grid(&samples, &grid, bw).unwrap();
        let truth: Vec<f64> = grid
            .points()
            .map(|y| mix.marginal_density(&schedule, 0.0, y).unwrap())
            .collect();
        let mass_ok = (grid_mass(&kde, &grid) - 1.0).abs() <= 0.02;
        let self_tv = tv_error(&kde, &kde, &grid).unwrap();
        let fwd = tv_error(&kde, &truth, &grid).unwrap();
        let bwd = tv_error(&truth, &kde, &grid).unwrap();
        let ok = mass_ok && self_tv == 0.0 && (fwd - bwd).abs() <= 1e-14 && (0.0..=1.0).contains(&fwd);
        families.push(("kde-mass-and-tv", ok));
    }

    // Bitwise determinism of a full study across rayon pool sizes, with the
    // wall-clock column masked.
    {
        let cfg = json!({
            "schema_version": 1,
            "schedule": {"kind": "constant_ou", "horizon": 16.0},
            "grid": {"n_base": 512, "tau": 0.0, "n_steps": [8, 16, 32], "strict_alignment": true},
            "schemes": ["RK2"],
            "target": three_mode_target(),
            "score_error": {"mode": "fixed", "eps": 1e-3},
            "n_particles": 2000,
            "seed": PARTICLE_SEED,
        });
        let render = |threads: usize| {
            let exp = Experiment::from_config(
                ExperimentConfig::from_json(&cfg.to_string()).unwrap(),
            )
            .unwrap();
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            let result = pool.install(|| exp.run_all().unwrap());
            mask_runtime(&render_csv(&result))
        };
        families.push(("thread-count-determinism", render(1) == render(3)));
    }

    let all_ok = families.iter().all(|(_, ok)| *ok);
    let details = families
        .iter()
        .map(|(name, ok)| format!("{name} {}", if *ok { "ok" } else { "VIOLATED" }))
        .collect::<Vec<_>>()
        .join("; ");
    report(9, "invariant-suites", all_ok, &details);
    assert!(all_ok, "{details}");
}

/// Blanks the wall-clock column (index 10) of every CSV data row.
fn mask_runtime(csv: &str) -> String {
    csv.lines()
        .map(|line| {
            let mut cols: Vec<&str> = line.split(',').collect();
            if cols.len() == 12 && cols[10] != "runtime_s" {
                cols[10] = "";
            }
            cols.join(",")
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// Deserializes the JSON component list used by the config into the
/// constructor's component type.
fn component_vec(components: Vec<Value>) -> Vec<pfode::target::GaussianComponent> {
    components
        .into_iter()
        .map(|c| pfode::target::GaussianComponent {
            weight: c["weight"].as_f64().unwrap(),
            mean: c["mean"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect(),
            cov: c["cov"]
                .as_array()
                .unwrap()
                .iter()
                .flat_map(|row| row.as_array().unwrap().iter().map(|v| v.as_f64().unwrap()))
                .collect(),
        })
        .collect()
}
