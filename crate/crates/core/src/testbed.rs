//! Stochastic quadratic problems with a known gradient, Hessian and noise
//! covariance, where the optimal `gamma` for the next step has a closed form.
//!
//! The loss is `J(w) = 1/2 (w - w*)^T H (w - w*)` and each observation
//! contributes the gradient `H (w - w*) + eta_i` with `eta_i ~ N(0, Sigma)`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::controller::{
    build_g, compute_a_hat, compute_b_hat, compute_v_hat, solve_gamma, ControllerConfig, GroupState, SolveMode,
    TraceRecord,
};
use crate::error::{Error, Result};
use crate::linalg::{solve2, Mat2, Vec2};
use crate::nn::BatchGradStats;
use crate::optim::{apply_update, momentum_gradient, momentum_gradient_ab, OptimizerKind};
use crate::rng::Rng;

#[derive(Debug, Clone)]
pub struct QuadraticProblem {
    h: DMatrix<f64>,
    w_star: DVector<f64>,
    noise_cov: DMatrix<f64>,
    eigvals: DVector<f64>,
    /// Columns are the eigenvectors of `H`.
    eigvecs: DMatrix<f64>,
    /// `L` with `L L^T = Sigma`.
    noise_factor: DMatrix<f64>,
    h_inv: DMatrix<f64>,
}

impl QuadraticProblem {
    pub fn new(h: DMatrix<f64>, w_star: DVector<f64>, noise_cov: DMatrix<f64>) -> Result<Self> {
        let p = w_star.len();
        if h.shape() != (p, p) || noise_cov.shape() != (p, p) || p == 0 {
            return Err(Error::Shape(format!("H {:?} and Sigma {:?} for p = {p}", h.shape(), noise_cov.shape())));
        }
        let sym = |m: &DMatrix<f64>| (m - m.transpose()).amax() <= 1e-12 * m.amax().max(1.0);
        if !sym(&h) || !sym(&noise_cov) {
            return Err(Error::InvalidArgument("H and Sigma must be symmetric".into()));
        }
        let he = SymmetricEigen::new(h.clone());
        if he.eigenvalues.min() <= 0.0 {
            return Err(Error::InvalidArgument("H must be positive definite".into()));
        }
        let se = SymmetricEigen::new(noise_cov.clone());
        if se.eigenvalues.min() < -1e-12 * se.eigenvalues.amax().max(1.0) {
            return Err(Error::InvalidArgument("Sigma must be positive semidefinite".into()));
        }
        let roots = se.eigenvalues.map(|v| v.max(0.0).sqrt());
        let noise_factor = &se.eigenvectors * DMatrix::from_diagonal(&roots);
        let h_inv = &he.eigenvectors * DMatrix::from_diagonal(&he.eigenvalues.map(|v| 1.0 / v)) * he.eigenvectors.transpose();
        Ok(QuadraticProblem {
            h,
            w_star,
            noise_cov,
            eigvals: he.eigenvalues,
            eigvecs: he.eigenvectors,
            noise_factor,
            h_inv,
        })
    }

    /// A random instance: Hessian eigenvalues in `[0.5, 2]` with a random
    /// orthogonal basis, a standard normal minimizer and
    /// `Sigma = noise_scale * B B^T / p` for a standard normal `B`.
    pub fn random(p: usize, noise_scale: f64, rng: &mut Rng) -> Result<Self> {
        let q = random_orthogonal(p, rng);
        let lambda = DVector::from_fn(p, |_, _| rng.uniform_range(0.5, 2.0));
        let h = &q * DMatrix::from_diagonal(&lambda) * q.transpose();
        let h = (&h + h.transpose()) * 0.5;
        let w_star = DVector::from_fn(p, |_, _| rng.normal());
        let b = DMatrix::from_fn(p, p, |_, _| rng.normal());
        let sigma = &b * b.transpose() * (noise_scale / p as f64);
        let sigma = (&sigma + sigma.transpose()) * 0.5;
        QuadraticProblem::new(h, w_star, sigma)
    }

    pub fn dim(&self) -> usize {
        self.w_star.len()
    }

    pub fn hessian(&self) -> &DMatrix<f64> {
        &self.h
    }

    pub fn w_star(&self) -> &DVector<f64> {
        &self.w_star
    }

    pub fn noise_cov(&self) -> &DMatrix<f64> {
        &self.noise_cov
    }

    pub fn eigenvalues(&self) -> &DVector<f64> {
        &self.eigvals
    }

    /// Expresses a vector in the eigenbasis of `H`.
    pub fn to_eigenbasis(&self, v: &DVector<f64>) -> DVector<f64> {
        self.eigvecs.tr_mul(v)
    }

    pub fn from_eigenbasis(&self, v: &DVector<f64>) -> DVector<f64> {
        &self.eigvecs * v
    }

    pub fn loss(&self, w: &DVector<f64>) -> f64 {
        let d = w - &self.w_star;
        0.5 * d.dot(&(&self.h * &d))
    }

    pub fn true_grad(&self, w: &DVector<f64>) -> DVector<f64> {
        &self.h * (w - &self.w_star)
    }

    /// `trace(H^-1 Sigma)`.
    pub fn noise_trace(&self) -> f64 {
        (&self.h_inv * &self.noise_cov).trace()
    }

    pub fn sample_batch_grads(&self, w: &DVector<f64>, n: usize, rng: &mut Rng) -> Vec<DVector<f64>> {
        let g = self.true_grad(w);
        let p = self.dim();
        (0..n)
            .map(|_| {
                let z = DVector::from_fn(p, |_, _| rng.normal());
                &g + &self.noise_factor * z
            })
            .collect()
    }

    /// Closed-form `A`, `b` and `gamma = A^-1 b` for a mini-batch of `n`
    /// with `H_hat = H`, treating `g_prev` as fixed.
    pub fn analytic_oracle(&self, w: &DVector<f64>, g_prev: &DVector<f64>, n: usize) -> Result<OracleResult> {
        if n == 0 || g_prev.len() != self.dim() || w.len() != self.dim() {
            return Err(Error::InvalidArgument("analytic oracle needs n >= 1 and matching shapes".into()));
        }
        let g = self.true_grad(w);
        let noise = self.noise_trace() / n as f64;
        let hg = &self.h_inv * &g;
        let a11 = g.dot(&hg) + noise;
        let a12 = a11 - g_prev.dot(&hg);
        let diff = &g - g_prev;
        let a22 = diff.dot(&(&self.h_inv * &diff)) + noise;
        let a = Mat2::symmetric(a11, a12, a22);
        let b = compute_b_hat(noise);
        let gamma = solve2(&a, b, 0.0)?;
        Ok(OracleResult { gamma, a, b, noise })
    }

    /// Expected loss after one step with `gamma`, from the closed form.
    pub fn analytic_expected_loss(oracle: &OracleResult, gamma: Vec2) -> f64 {
        0.5 * oracle.noise - gamma.dot(&oracle.b) + 0.5 * oracle.a.quad_form(gamma)
    }

    /// Grid minimizer of the Monte-Carlo mean of `J(w_1; gamma)` over
    /// `draws` simulated mini-batches, shared by every grid cell.
    ///
    /// For a fixed draw, `J(w_1; gamma)` is a quadratic in `gamma` whose
    /// coefficients are inner products of `u = w - w* - H^-1 g` with the two
    /// columns of `G`; summing those over draws gives the exact empirical
    /// mean at every cell in one pass.
    pub fn brute_force_gamma(
        &self,
        w: &DVector<f64>,
        g_prev: &DVector<f64>,
        n: usize,
        grid: &Grid,
        draws: usize,
        rng: &mut Rng,
    ) -> Result<BruteForce> {
        if draws == 0 || n == 0 {
            return Err(Error::InvalidArgument("brute force needs draws >= 1 and n >= 1".into()));
        }
        let offset = w - &self.w_star;
        let (mut c0, mut c1, mut c2) = (0.0, [0.0; 2], [0.0; 3]);
        for _ in 0..draws {
            let g = mean(&self.sample_batch_grads(w, n, rng));
            let hg = &self.h_inv * &g;
            let diff = &g - g_prev;
            let hd = &self.h_inv * &diff;
            let u = &offset - &hg;
            c0 += 0.5 * u.dot(&(&self.h * &u));
            c1[0] += g.dot(&u);
            c1[1] += diff.dot(&u);
            c2[0] += g.dot(&hg);
            c2[1] += g.dot(&hd);
            c2[2] += diff.dot(&hd);
        }
        let m = draws as f64;
        let lin = Vec2::new(c1[0] / m, c1[1] / m);
        let quad = Mat2::symmetric(c2[0] / m, c2[1] / m, c2[2] / m);
        let c0 = c0 / m;
        Ok(grid_minimize(grid, |gamma| c0 + gamma.dot(&lin) + 0.5 * quad.quad_form(gamma)))
    }

    /// The same minimizer evaluating every cell by stepping every draw
    /// explicitly. Cost grows with the grid size times the draw count.
    pub fn brute_force_gamma_direct(
        &self,
        w: &DVector<f64>,
        g_prev: &DVector<f64>,
        n: usize,
        grid: &Grid,
        draws: usize,
        rng: &mut Rng,
    ) -> Result<BruteForce> {
        if draws == 0 || n == 0 {
            return Err(Error::InvalidArgument("brute force needs draws >= 1 and n >= 1".into()));
        }
        let batches: Vec<DVector<f64>> = (0..draws).map(|_| mean(&self.sample_batch_grads(w, n, rng))).collect();
        Ok(grid_minimize(grid, |gamma| {
            let total: f64 = batches
                .iter()
                .map(|g| {
                    let g_hat = g * (1.0 - gamma.x() - gamma.y()) + g_prev * gamma.y();
                    self.loss(&(w - &self.h_inv * g_hat))
                })
                .sum();
            total / draws as f64
        }))
    }

    /// One controller estimate of `gamma` from a fresh mini-batch, computed
    /// in the eigenbasis of `H` so that `H_hat = H` is diagonal.
    pub fn estimate_gamma(&self, w: &DVector<f64>, g_prev: &DVector<f64>, n: usize, ridge: f64, rng: &mut Rng) -> Result<Vec2> {
        let samples: Vec<Vec<f64>> = self
            .sample_batch_grads(w, n, rng)
            .iter()
            .map(|g| self.to_eigenbasis(g).as_slice().to_vec())
            .collect();
        let stats = BatchGradStats::from_samples(&samples)?;
        let hdiag = self.eigvals.as_slice();
        let prev = self.to_eigenbasis(g_prev);
        let a = compute_a_hat(&build_g(&stats.batch_grad, prev.as_slice())?, hdiag)?;
        let v = compute_v_hat(stats.per_sample_sumsq(hdiag), &stats.batch_grad, hdiag, n)?;
        let solved = solve_gamma(&a, compute_b_hat(v), ridge, SolveMode::Full, Vec2::ZERO);
        if solved.singular {
            return Err(Error::Singular { det: a.det() });
        }
        Ok(solved.gamma)
    }
}

fn mean(samples: &[DVector<f64>]) -> DVector<f64> {
    let mut sum = DVector::zeros(samples[0].len());
    for s in samples {
        sum += s;
    }
    sum / samples.len() as f64
}

fn random_orthogonal(p: usize, rng: &mut Rng) -> DMatrix<f64> {
    let m = DMatrix::from_fn(p, p, |_, _| rng.normal());
    let qr = m.qr();
    let (q, r) = (qr.q(), qr.r());
    // Fix column signs so the distribution is Haar.
    let signs = DVector::from_fn(p, |i, _| if r[(i, i)] < 0.0 { -1.0 } else { 1.0 });
    q * DMatrix::from_diagonal(&signs)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleResult {
    pub gamma: Vec2,
    pub a: Mat2,
    pub b: Vec2,
    /// `trace(H^-1 Sigma) / N`.
    pub noise: f64,
}

/// Square grid of `gamma` values, identical along both axes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    pub lo: f64,
    pub hi: f64,
    pub step: f64,
}

impl Default for Grid {
    fn default() -> Self {
        Grid { lo: -0.5, hi: 1.0, step: 0.02 }
    }
}

impl Grid {
    pub fn points(&self) -> usize {
        ((self.hi - self.lo) / self.step).round() as usize + 1
    }

    pub fn value(&self, k: usize) -> f64 {
        self.lo + k as f64 * self.step
    }

    pub fn contains_interior(&self, g: Vec2) -> bool {
        let (lo, hi) = (self.lo + self.step, self.hi - self.step);
        (lo..=hi).contains(&g.x()) && (lo..=hi).contains(&g.y())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BruteForce {
    pub gamma: Vec2,
    pub best_value: f64,
    /// `(gamma1, gamma2, mean loss)` for every cell, gamma1 major.
    pub surface: Vec<(f64, f64, f64)>,
}

fn grid_minimize(grid: &Grid, mut f: impl FnMut(Vec2) -> f64) -> BruteForce {
    let k = grid.points();
    let mut surface = Vec::with_capacity(k * k);
    let mut best = (Vec2::ZERO, f64::INFINITY);
    for i in 0..k {
        for j in 0..k {
            let gamma = Vec2::new(grid.value(i), grid.value(j));
            let v = f(gamma);
            if v < best.1 {
                best = (gamma, v);
            }
            surface.push((gamma.x(), gamma.y(), v));
        }
    }
    BruteForce { gamma: best.0, best_value: best.1, surface }
}

/// A problem together with the point and momentum at which the oracle is
/// evaluated.
#[derive(Debug, Clone)]
pub struct OracleCase {
    pub problem: QuadraticProblem,
    pub w: DVector<f64>,
    pub g_prev: DVector<f64>,
    pub n: usize,
}

impl OracleCase {
    /// Draws instances until the analytic gamma lies inside `grid`. The
    /// distance to the minimizer is set so that the gradient signal
    /// `g^T H^-1 g` is `1 / r` times the noise term, with
    /// `r ~ U(r_lo, r_hi)`; `g_prev` differs from the true gradient by a
    /// random direction orthogonal to it in the `H^-1` inner product.
    pub fn random(p: usize, n: usize, noise_ratio: (f64, f64), grid: &Grid, rng: &mut Rng) -> Result<Self> {
        for _ in 0..1000 {
            let problem = QuadraticProblem::random(p, 1.0, rng)?;
            let noise = problem.noise_trace() / n as f64;
            let r = rng.uniform_range(noise_ratio.0, noise_ratio.1);
            let dir = DVector::from_fn(p, |_, _| rng.normal());
            // g^T H^-1 g = d^T H d for w - w* = d.
            let signal = dir.dot(&(problem.hessian() * &dir));
            let w = problem.w_star() + dir * (noise / r / signal).sqrt();
            let g = problem.true_grad(&w);
            // g - g_prev is H^-1-orthogonal to g, with a random length ratio.
            let hinv = problem.hessian().clone().try_inverse().ok_or(Error::Singular { det: 0.0 })?;
            let metric = |a: &DVector<f64>, b: &DVector<f64>| a.dot(&(&hinv * b));
            let z = DVector::from_fn(p, |_, _| rng.normal());
            let e = &z - &g * (metric(&z, &g) / metric(&g, &g));
            let rho = rng.uniform_range(0.7, 1.4);
            let len = rho * (metric(&g, &g) / metric(&e, &e)).sqrt();
            let g_prev = &g - e * len;
            let case = OracleCase { problem, w, g_prev, n };
            if let Ok(o) = case.problem.analytic_oracle(&case.w, &case.g_prev, n) {
                if grid.contains_interior(o.gamma) {
                    return Ok(case);
                }
            }
        }
        Err(Error::InvalidArgument("no instance with an interior oracle found".into()))
    }

    pub fn analytic(&self) -> Result<OracleResult> {
        self.problem.analytic_oracle(&self.w, &self.g_prev, self.n)
    }

    pub fn brute_force(&self, grid: &Grid, draws: usize, rng: &mut Rng) -> Result<BruteForce> {
        self.problem.brute_force_gamma(&self.w, &self.g_prev, self.n, grid, draws, rng)
    }

    /// Mean of the controller's per-batch gamma over `batches` mini-batches.
    pub fn mean_estimate(&self, batches: usize, ridge: f64, rng: &mut Rng) -> Result<Vec2> {
        let mut sum = Vec2::ZERO;
        for _ in 0..batches {
            sum = sum + self.problem.estimate_gamma(&self.w, &self.g_prev, self.n, ridge, rng)?;
        }
        Ok((1.0 / batches as f64) * sum)
    }
}

/// How the testbed trainer picks each step's update.
#[derive(Debug, Clone, PartialEq)]
pub enum TestbedPolicy {
    Auto(ControllerConfig),
    Fixed { alpha: f64, beta: f64 },
    Gamma(Vec2),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TestbedTrace {
    /// `J(w_t)` for `t = 0..=steps`.
    pub losses: Vec<f64>,
    pub records: Vec<TraceRecord>,
}

/// Runs `steps` preconditioned updates with `H_hat = H` from `w0`.
pub fn run_testbed_training(
    problem: &QuadraticProblem,
    w0: &DVector<f64>,
    policy: &TestbedPolicy,
    n: usize,
    steps: u64,
    rng: &mut Rng,
) -> Result<TestbedTrace> {
    if let TestbedPolicy::Auto(cfg) = policy {
        cfg.validate()?;
    }
    let p = problem.dim();
    let hdiag: Vec<f64> = problem.eigenvalues().as_slice().to_vec();
    let star = problem.to_eigenbasis(problem.w_star());
    let mut w: Vec<f64> = problem.to_eigenbasis(w0).as_slice().to_vec();
    let loss = |w: &[f64]| -> f64 { 0.5 * w.iter().zip(star.iter()).zip(&hdiag).map(|((a, b), h)| h * (a - b) * (a - b)).sum::<f64>() };
    let initial = loss(&w);
    let mut losses = vec![initial];
    let mut records = Vec::new();
    let mut group = match policy {
        TestbedPolicy::Auto(cfg) => GroupState::new("w", p, cfg),
        _ => GroupState::new("w", p, &ControllerConfig::for_optimizer(&OptimizerKind::Sgd)),
    };
    for step in 1..=steps {
        let x = problem.from_eigenbasis(&DVector::from_column_slice(&w));
        let samples: Vec<Vec<f64>> = problem
            .sample_batch_grads(&x, n, rng)
            .iter()
            .map(|g| problem.to_eigenbasis(g).as_slice().to_vec())
            .collect();
        let stats = BatchGradStats::from_samples(&samples)?;
        match policy {
            TestbedPolicy::Auto(cfg) => {
                let sumsq = stats.per_sample_sumsq(&hdiag);
                records.push(crate::controller::step_with_hessian(
                    &mut group,
                    &mut w,
                    &stats.batch_grad,
                    sumsq,
                    n,
                    &hdiag,
                    SolveMode::Full,
                    cfg,
                )?);
            }
            TestbedPolicy::Fixed { alpha, beta } => {
                let g_hat = momentum_gradient_ab(&stats.batch_grad, &mut group.optimizer, *alpha, *beta);
                apply_update(&mut w, &g_hat, &hdiag)?;
            }
            TestbedPolicy::Gamma(gamma) => {
                let g_hat = momentum_gradient(&stats.batch_grad, &mut group.optimizer, *gamma);
                apply_update(&mut w, &g_hat, &hdiag)?;
            }
        }
        let l = loss(&w);
        if !l.is_finite() || (initial > 0.0 && l > 1e6 * initial) {
            return Err(Error::Divergence { step, loss: l, initial });
        }
        losses.push(l);
    }
    Ok(TestbedTrace { losses, records })
}
