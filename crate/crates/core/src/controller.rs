//! Per-group learning-rate and momentum controller.
//!
//! Each step the controller estimates the 2x2 system `A gamma = b` from the
//! mini-batch, solves it, smooths the solution, clamps it to the feasible box
//! and converts `gamma = (gamma1, gamma2)` to a learning rate
//! `alpha = 1 - gamma1` and momentum `beta = gamma2 / (1 - gamma1)`.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::linalg::{solve2, Mat2, Vec2};
use crate::nn::BatchGradStats;
use crate::optim::{apply_update, hessian_diag, momentum_gradient_ab, OptimizerKind, OptimizerState};
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveMode {
    /// Tune both components of gamma.
    Full,
    /// Tune gamma1 only, with gamma2 held at zero.
    AlphaOnly,
}

impl FromStr for SolveMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(SolveMode::Full),
            "alpha_only" => Ok(SolveMode::AlphaOnly),
            other => Err(Error::InvalidArgument(format!("unknown solve mode {other:?}"))),
        }
    }
}

impl fmt::Display for SolveMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SolveMode::Full => "full",
            SolveMode::AlphaOnly => "alpha_only",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Clamps {
    pub alpha_min: f64,
    pub alpha_max: f64,
    pub beta_max: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControllerConfig {
    /// EWMA weight on the previous smoothed gamma.
    pub upsilon: f64,
    /// Relative ridge; the solver adds `ridge * trace(A) / 2` to the diagonal.
    pub ridge: f64,
    pub clamps: Clamps,
    pub adagrad_mode: SolveMode,
    pub init_alpha: f64,
    /// Steps during which the solver is skipped and `(init_alpha, 0)` used.
    pub warmup_steps: u64,
    /// When set, `upsilon` applies to mini-batches of this size and a batch
    /// of `N` uses `upsilon^(N / size)`, so the smoothing horizon is a fixed
    /// number of samples.
    pub horizon_batch: Option<usize>,
}

impl ControllerConfig {
    pub fn for_optimizer(kind: &OptimizerKind) -> Self {
        let sgd_like = matches!(kind, OptimizerKind::Sgd | OptimizerKind::SgdMomentum);
        ControllerConfig {
            upsilon: 0.99,
            ridge: 0.1,
            clamps: Clamps { alpha_min: 1e-8, alpha_max: if sgd_like { 10.0 } else { 1.0 }, beta_max: 0.999 },
            adagrad_mode: SolveMode::AlphaOnly,
            init_alpha: if sgd_like { 0.01 } else { 0.001 },
            warmup_steps: 1,
            horizon_batch: Some(64),
        }
    }

    /// Never leaves warmup, so every step uses `(init_alpha, 0)`.
    pub fn frozen(mut self, alpha: f64) -> Self {
        self.init_alpha = alpha;
        self.warmup_steps = u64::MAX;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.clamps;
        let ok = (0.0..1.0).contains(&self.upsilon)
            && self.ridge >= 0.0
            && c.alpha_min > 0.0
            && c.alpha_min <= c.alpha_max
            && c.alpha_max.is_finite()
            && (0.0..1.0).contains(&c.beta_max)
            && self.init_alpha >= c.alpha_min
            && self.init_alpha <= c.alpha_max
            && self.horizon_batch != Some(0);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("inconsistent controller configuration {self:?}")))
        }
    }

    /// Smoothing weight for a mini-batch of `n` samples.
    pub fn upsilon_for(&self, n: usize) -> f64 {
        match self.horizon_batch {
            Some(reference) => self.upsilon.powf(n as f64 / reference as f64),
            None => self.upsilon,
        }
    }

    pub fn mode_for(&self, kind: &OptimizerKind) -> SolveMode {
        match kind {
            OptimizerKind::AdaGrad { .. } => self.adagrad_mode,
            _ => SolveMode::Full,
        }
    }
}

/// Smoothed controller state of one parameter group.
#[derive(Debug, Clone, PartialEq)]
pub struct GammaState {
    pub gamma_raw: Vec2,
    pub gamma_ewma: Vec2,
    pub alpha: f64,
    pub beta: f64,
    /// Completed controller steps.
    pub steps: u64,
}

impl GammaState {
    pub fn new(cfg: &ControllerConfig) -> Self {
        let start = Vec2::new(1.0 - cfg.init_alpha, 0.0);
        GammaState { gamma_raw: start, gamma_ewma: start, alpha: cfg.init_alpha, beta: 0.0, steps: 0 }
    }
}

/// The two columns `(g, g - g_hat_prev)`, kept implicit.
#[derive(Debug, Clone, Copy)]
pub struct GColumns<'a, T: Real> {
    g: &'a [T],
    prev: &'a [T],
}

impl<'a, T: Real> GColumns<'a, T> {
    pub fn first(&self) -> &'a [T] {
        self.g
    }

    pub fn second(&self) -> impl Iterator<Item = f64> + 'a {
        self.g.iter().zip(self.prev).map(|(&g, &p)| g.to_f64() - p.to_f64())
    }

    pub fn len(&self) -> usize {
        self.g.len()
    }

    pub fn is_empty(&self) -> bool {
        self.g.is_empty()
    }
}

pub fn build_g<'a, T: Real>(g: &'a [T], g_hat_prev: &'a [T]) -> Result<GColumns<'a, T>> {
    if g.len() != g_hat_prev.len() {
        return Err(Error::Shape(format!("gradient of {} with momentum of {}", g.len(), g_hat_prev.len())));
    }
    Ok(GColumns { g, prev: g_hat_prev })
}

/// `G^T H^-1 G` for the implicit columns and a diagonal `H`.
pub fn compute_a_hat<T: Real>(cols: &GColumns<'_, T>, hdiag: &[T]) -> Result<Mat2> {
    if hdiag.len() != cols.len() {
        return Err(Error::Shape(format!("{} preconditioner entries for {} coordinates", hdiag.len(), cols.len())));
    }
    let (mut a11, mut a12, mut a22) = (0.0, 0.0, 0.0);
    for ((&g, d), &h) in cols.g.iter().zip(cols.second()).zip(hdiag) {
        let g = g.to_f64();
        let inv = 1.0 / h.to_f64();
        a11 += g * g * inv;
        a12 += g * d * inv;
        a22 += d * d * inv;
    }
    let a = Mat2::symmetric(a11, a12, a22);
    if a.is_finite() {
        Ok(a)
    } else {
        Err(Error::NonFinite("A".into()))
    }
}

/// Unbiased estimate of the `H^-1`-weighted variance of the mean gradient,
/// `(S - N g^T H^-1 g) / (N (N - 1))` with `S = sum_i g_i^T H^-1 g_i`.
pub fn compute_v_hat<T: Real>(per_sample_sumsq: f64, g: &[T], hdiag: &[T], n: usize) -> Result<f64> {
    if n < 2 {
        return Err(Error::VarianceUndefined(n));
    }
    if g.len() != hdiag.len() {
        return Err(Error::Shape(format!("{} preconditioner entries for {} coordinates", hdiag.len(), g.len())));
    }
    let gg: f64 = g.iter().zip(hdiag).map(|(&g, &h)| g.to_f64() * g.to_f64() / h.to_f64()).sum();
    let n = n as f64;
    let v = (per_sample_sumsq - n * gg) / (n * (n - 1.0));
    if !v.is_finite() {
        return Err(Error::NonFinite("V".into()));
    }
    Ok(v.max(0.0))
}

pub fn compute_b_hat(v_hat: f64) -> Vec2 {
    Vec2::splat(v_hat)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GammaSolve {
    pub gamma: Vec2,
    pub singular: bool,
}

/// Solves for the raw gamma; on a singular system returns `fallback`
/// flagged as singular.
pub fn solve_gamma(a: &Mat2, b: Vec2, ridge: f64, mode: SolveMode, fallback: Vec2) -> GammaSolve {
    let solved = match mode {
        SolveMode::Full => solve2(a, b, ridge * a.trace() / 2.0).ok(),
        SolveMode::AlphaOnly => {
            let a11 = a.get(0, 0);
            let denom = a11 + ridge * a11;
            let g1 = b.x() / denom;
            (denom > 0.0 && g1.is_finite()).then(|| Vec2::new(g1, 0.0))
        }
    };
    match solved {
        Some(gamma) if gamma.is_finite() => GammaSolve { gamma, singular: false },
        _ => GammaSolve { gamma: fallback, singular: true },
    }
}

/// `gamma_E <- (1 - upsilon) gamma_O + upsilon gamma_E`.
pub fn ewma_update(state: &mut GammaState, gamma_raw: Vec2, upsilon: f64) -> Vec2 {
    state.gamma_raw = gamma_raw;
    state.gamma_ewma = (1.0 - upsilon) * gamma_raw + upsilon * state.gamma_ewma;
    state.gamma_ewma
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Converted {
    pub gamma: Vec2,
    pub alpha: f64,
    pub beta: f64,
    pub alpha_clamped: bool,
    pub beta_clamped: bool,
}

/// Projects gamma onto the feasible box and converts it to `(alpha, beta)`.
/// The returned `gamma` is the projected one.
pub fn clamp_and_convert(gamma: Vec2, clamps: &Clamps) -> Converted {
    let lo = 1.0 - clamps.alpha_max;
    let hi = 1.0 - clamps.alpha_min;
    let g1 = if gamma.x().is_nan() { hi } else { gamma.x().clamp(lo, hi) };
    let alpha = 1.0 - g1;
    let raw_beta = gamma.y() / alpha;
    let beta = if raw_beta.is_nan() { 0.0 } else { raw_beta.clamp(0.0, clamps.beta_max) };
    Converted {
        gamma: Vec2::new(g1, beta * alpha),
        alpha,
        beta,
        alpha_clamped: g1 != gamma.x(),
        beta_clamped: beta != raw_beta,
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StepFlags {
    pub warmup: bool,
    pub singular: bool,
    pub alpha_clamped: bool,
    pub beta_clamped: bool,
}

impl fmt::Display for StepFlags {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names = [
            (self.warmup, "warmup"),
            (self.singular, "singular"),
            (self.alpha_clamped, "clamped_alpha"),
            (self.beta_clamped, "clamped_beta"),
        ];
        let mut first = true;
        for (_, name) in names.iter().filter(|(on, _)| *on) {
            if !first {
                f.write_str("|")?;
            }
            f.write_str(name)?;
            first = false;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub step: u64,
    pub group: String,
    pub alpha: f64,
    pub beta: f64,
    pub gamma1: f64,
    pub gamma2: f64,
    pub vhat: f64,
    pub a: Mat2,
    pub flags: StepFlags,
}

/// Optimizer and controller state of one parameter group.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupState<T: Real = f64> {
    pub name: String,
    pub optimizer: OptimizerState<T>,
    pub gamma: GammaState,
}

impl<T: Real> GroupState<T> {
    pub fn new(name: impl Into<String>, len: usize, cfg: &ControllerConfig) -> Self {
        GroupState { name: name.into(), optimizer: OptimizerState::new(len), gamma: GammaState::new(cfg) }
    }
}

/// One full controller step for a group: Hessian estimate, statistics,
/// gamma, smoothing, momentum gradient and weight update.
pub fn autoopt_step<T: Real>(
    group: &mut GroupState<T>,
    params: &mut [T],
    stats: &BatchGradStats<T>,
    kind: &OptimizerKind,
    cfg: &ControllerConfig,
) -> Result<TraceRecord> {
    if params.len() != stats.batch_grad.len() || stats.per_sample_sq.len() != params.len() {
        return Err(Error::Shape(format!(
            "group {} has {} weights but statistics for {}",
            group.name,
            params.len(),
            stats.batch_grad.len()
        )));
    }
    let hdiag = hessian_diag(kind, &mut group.optimizer, &stats.batch_grad, group.gamma.beta)?;
    let sumsq = stats.per_sample_sumsq(&hdiag);
    step_with_hessian(group, params, &stats.batch_grad, sumsq, stats.sample_count, &hdiag, cfg.mode_for(kind), cfg)
}

/// Controller step with an externally supplied diagonal Hessian. The
/// optimizer's second-moment buffers are left untouched.
#[allow(clippy::too_many_arguments)]
pub fn step_with_hessian<T: Real>(
    group: &mut GroupState<T>,
    params: &mut [T],
    g: &[T],
    per_sample_sumsq: f64,
    n: usize,
    hdiag: &[T],
    mode: SolveMode,
    cfg: &ControllerConfig,
) -> Result<TraceRecord> {
    let cols = build_g(g, &group.optimizer.momentum)?;
    let a = compute_a_hat(&cols, hdiag)?;
    let vhat = compute_v_hat(per_sample_sumsq, g, hdiag, n)?;
    let t = group.gamma.steps + 1;
    let mut flags = StepFlags::default();
    let state = &mut group.gamma;
    if t <= cfg.warmup_steps {
        flags.warmup = true;
        state.gamma_ewma = Vec2::new(1.0 - cfg.init_alpha, 0.0);
        state.gamma_raw = state.gamma_ewma;
        state.alpha = cfg.init_alpha;
        state.beta = 0.0;
    } else {
        let solved = solve_gamma(&a, compute_b_hat(vhat), cfg.ridge, mode, state.gamma_ewma);
        flags.singular = solved.singular;
        let smoothed = ewma_update(state, solved.gamma, cfg.upsilon_for(n));
        let c = clamp_and_convert(smoothed, &cfg.clamps);
        state.gamma_ewma = c.gamma;
        state.alpha = c.alpha;
        state.beta = c.beta;
        flags.alpha_clamped = c.alpha_clamped;
        flags.beta_clamped = c.beta_clamped;
    }
    state.steps = t;
    let (alpha, beta, gamma) = (state.alpha, state.beta, state.gamma_ewma);
    let g_hat = momentum_gradient_ab(g, &mut group.optimizer, alpha, beta);
    apply_update(params, &g_hat, hdiag)?;
    Ok(TraceRecord {
        step: t,
        group: group.name.clone(),
        alpha,
        beta,
        gamma1: gamma.x(),
        gamma2: gamma.y(),
        vhat,
        a,
        flags,
    })
}
