//! Self-check suites with a machine-readable report.

use std::path::Path;

use anyhow::{Context, Result};
use autoopt::controller::{
    build_g, compute_a_hat, compute_b_hat, compute_v_hat, ewma_update, solve_gamma, ControllerConfig, GammaState,
    SolveMode,
};
use autoopt::nn::gradcheck::{finite_difference_errors, layer_cases, per_sample_consistency};
use autoopt::optim::OptimizerKind;
use autoopt::testbed::{run_testbed_training, QuadraticProblem, TestbedPolicy};
use autoopt::{Rng, Vec2};
use serde::Serialize;

use crate::config::OracleConfig;
use crate::oracle::compare_case;

/// `V_hat` from `(sum_i g_i^T D^-1 g_i, g, diag D, N)`.
pub type VarianceEstimator = fn(f64, &[f64], &[f64], usize) -> autoopt::Result<f64>;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Measurement {
    pub name: String,
    pub value: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteResult {
    pub suite: String,
    pub passed: bool,
    pub measurements: Vec<Measurement>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckReport {
    pub passed: bool,
    pub suites: Vec<SuiteResult>,
}

fn at_most(name: impl Into<String>, value: f64, tolerance: f64) -> Measurement {
    Measurement { name: name.into(), value, tolerance, passed: value <= tolerance }
}

fn suite(name: &str, body: impl FnOnce() -> Result<Vec<Measurement>>) -> SuiteResult {
    match body() {
        Ok(measurements) => SuiteResult {
            suite: name.to_string(),
            passed: measurements.iter().all(|m| m.passed),
            measurements,
            error: None,
        },
        Err(e) => SuiteResult { suite: name.to_string(), passed: false, measurements: Vec::new(), error: Some(format!("{e:#}")) },
    }
}

/// Central differences and explicit per-sample gradients on small networks
/// covering every layer kind.
pub fn finite_difference_suite(seed: u64) -> Result<Vec<Measurement>> {
    let mut rng = Rng::new(seed);
    let mut out = Vec::new();
    for mut case in layer_cases(&mut rng)? {
        let worst = finite_difference_errors(&mut case.net, &case.input, &case.targets, case.mode, 1e-5)?
            .into_iter()
            .map(|(_, e)| e)
            .fold(0.0, f64::max);
        out.push(at_most(format!("{}/finite_difference_rel", case.name), worst, 1e-5));
        let ps = per_sample_consistency(&case.net, &case.input, &case.targets, case.mode, &mut rng)?;
        out.push(at_most(format!("{}/per_sample_mean_abs", case.name), ps.mean_error, 1e-10));
        out.push(at_most(format!("{}/streamed_sumsq_rel", case.name), ps.sumsq_error, 1e-9));
    }
    Ok(out)
}

/// Mean of `V_hat` over simulated mini-batches divided by its expectation,
/// for `g_i = mu + z_i` with standard normal `z_i` and `D = I`, where the
/// expectation is `p / N`.
pub fn vhat_ratio(estimator: VarianceEstimator, p: usize, n: usize, batches: usize, seed: u64) -> Result<f64> {
    let mut rng = Rng::new(seed);
    let mu: Vec<f64> = (0..p).map(|_| rng.normal()).collect();
    let ones = vec![1.0; p];
    let mut total = 0.0;
    let mut mean = vec![0.0; p];
    for _ in 0..batches {
        mean.iter_mut().for_each(|m| *m = 0.0);
        let mut sumsq = 0.0;
        for _ in 0..n {
            for (m, &c) in mean.iter_mut().zip(&mu) {
                let v = c + rng.normal();
                *m += v;
                sumsq += v * v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        total += estimator(sumsq, &mean, &ones, n)?;
    }
    Ok(total / batches as f64 / (p as f64 / n as f64))
}

pub fn unbiasedness_suite(estimator: VarianceEstimator, batches: usize, seed: u64) -> Result<Vec<Measurement>> {
    let ratio = vhat_ratio(estimator, 10, 8, batches, seed)?;
    Ok(vec![
        Measurement { name: "mean_vhat_over_expected".into(), value: ratio, tolerance: 0.01, passed: (ratio - 1.0).abs() <= 0.01 },
    ])
}

/// Analytic, brute-force and estimated oracle on a few testbed cases.
pub fn oracle_suite(cfg: &OracleConfig, seed: u64) -> Result<Vec<Measurement>> {
    (0..cfg.cases)
        .map(|k| {
            let (row, _) = compare_case(cfg, seed, k)?;
            Ok(Measurement {
                name: format!("case{k}/max_cells_apart"),
                value: row.max_cells_apart,
                tolerance: 1.0,
                passed: row.agree,
            })
        })
        .collect()
}

/// One step from a random start on a noise-free quadratic with the exact
/// Hessian: once with `gamma` fixed at zero and once through the controller
/// with warmup and smoothing switched off. With no momentum history the
/// controller's system is rank one, so the ridge is what pins its solution
/// to zero.
pub fn newton_suite(seed: u64) -> Result<Vec<Measurement>> {
    let mut rng = Rng::new(seed);
    let problem = QuadraticProblem::random(10, 0.0, &mut rng)?;
    let w0 = problem.w_star() + nalgebra::DVector::from_fn(10, |_, _| 3.0 * rng.normal());
    let mut cfg = ControllerConfig::for_optimizer(&OptimizerKind::Sgd);
    cfg.warmup_steps = 0;
    cfg.upsilon = 0.0;
    cfg.clamps.alpha_max = 1.0;
    let fixed = run_testbed_training(&problem, &w0, &TestbedPolicy::Gamma(Vec2::ZERO), 4, 1, &mut rng.fork(1))?;
    let auto = run_testbed_training(&problem, &w0, &TestbedPolicy::Auto(cfg), 4, 1, &mut rng.fork(2))?;
    Ok(vec![
        at_most("gamma_zero/loss_after_one_step", fixed.losses[1], 1e-12),
        at_most("controller/loss_after_one_step", auto.losses[1], 1e-12),
    ])
}

/// Distance to a constant input must shrink by exactly `upsilon` per step.
pub fn ewma_suite() -> Result<Vec<Measurement>> {
    let upsilon = 0.9;
    let target = Vec2::new(0.3, -0.2);
    let mut state = GammaState::new(&ControllerConfig::for_optimizer(&OptimizerKind::Sgd));
    state.gamma_ewma = Vec2::new(-1.0, 2.0);
    let mut worst: f64 = 0.0;
    let mut prev = (state.gamma_ewma - target).norm();
    for _ in 0..50 {
        let now = (ewma_update(&mut state, target, upsilon) - target).norm();
        worst = worst.max((now / prev - upsilon).abs());
        prev = now;
    }
    Ok(vec![at_most("max_factor_deviation", worst, 1e-12)])
}

/// Scaling every per-sample gradient by 10 must leave the full solve
/// unchanged.
pub fn scale_invariance_suite(seed: u64) -> Result<Vec<Measurement>> {
    let mut rng = Rng::new(seed);
    let (p, n) = (20, 8);
    let hdiag: Vec<f64> = (0..p).map(|_| rng.uniform_range(0.5, 2.0)).collect();
    let samples: Vec<Vec<f64>> = (0..n).map(|_| (0..p).map(|_| rng.normal() + 0.5).collect()).collect();
    let prev: Vec<f64> = (0..p).map(|_| rng.normal()).collect();
    let solve = |c: f64| -> Result<Vec2> {
        let g: Vec<f64> = (0..p).map(|j| c * samples.iter().map(|s| s[j]).sum::<f64>() / n as f64).collect();
        let prev: Vec<f64> = prev.iter().map(|v| c * v).collect();
        let sumsq: f64 = samples.iter().flat_map(|s| s.iter().zip(&hdiag).map(|(v, h)| c * c * v * v / h)).sum();
        let a = compute_a_hat(&build_g(&g, &prev)?, &hdiag)?;
        let v = compute_v_hat(sumsq, &g, &hdiag, n)?;
        let solved = solve_gamma(&a, compute_b_hat(v), 0.0, SolveMode::Full, Vec2::ZERO);
        anyhow::ensure!(!solved.singular, "singular system");
        Ok(solved.gamma)
    };
    let (base, scaled) = (solve(1.0)?, solve(10.0)?);
    let rel = (scaled - base).norm() / base.norm();
    Ok(vec![at_most("relative_change", rel, 1e-10)])
}

/// Runs every suite with the given variance estimator.
pub fn run_checks_with(estimator: VarianceEstimator, seed: u64) -> CheckReport {
    let oracle = OracleConfig { cases: 3, draws: 4000, batches: 1000, ..OracleConfig::default() };
    let suites = vec![
        suite("finite_difference", || finite_difference_suite(seed)),
        suite("unbiasedness", || unbiasedness_suite(estimator, 100_000, seed)),
        suite("oracle_equivalence", || oracle_suite(&oracle, seed)),
        suite("newton", || newton_suite(seed)),
        suite("ewma", ewma_suite),
        suite("scale_invariance", || scale_invariance_suite(seed)),
    ];
    CheckReport { passed: suites.iter().all(|s| s.passed), suites }
}

/// The `check` command: writes `check.json` and returns the report.
pub fn cmd_check(out: &Path, seed: u64) -> Result<CheckReport> {
    let report = run_checks_with(compute_v_hat::<f64>, seed);
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let path = out.join("check.json");
    let text = serde_json::to_string_pretty(&report)?;
    std::fs::write(&path, text + "\n").with_context(|| format!("writing {}", path.display()))?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn squared_divisor(sumsq: f64, g: &[f64], hdiag: &[f64], n: usize) -> autoopt::Result<f64> {
        let gg: f64 = g.iter().zip(hdiag).map(|(g, h)| g * g / h).sum();
        let n = n as f64;
        Ok(((sumsq - n * gg) / (n * n)).max(0.0))
    }

    #[test]
    fn unbiasedness_catches_wrong_divisor() {
        let good = unbiasedness_suite(compute_v_hat::<f64>, 100_000, 5).unwrap();
        assert!(good[0].passed, "{good:?}");
        let bad = unbiasedness_suite(squared_divisor, 100_000, 5).unwrap();
        assert!(!bad[0].passed);
        assert!((bad[0].value - 0.875).abs() < 0.01);
    }

    #[test]
    fn small_suites_pass() {
        for s in [newton_suite(1).unwrap(), ewma_suite().unwrap(), scale_invariance_suite(2).unwrap()] {
            assert!(s.iter().all(|m| m.passed), "{s:?}");
        }
    }
}
