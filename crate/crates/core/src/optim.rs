//! SGD, SGD with momentum, Adam and AdaGrad in the common form
//! `w <- w - H^-1 g_hat`, where `g_hat` is the momentum gradient estimator and
//! `H` a diagonal preconditioner.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::linalg::Vec2;
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    Sgd,
    SgdMomentum,
    Adam { beta2: f64, eps: f64 },
    AdaGrad { eps: f64 },
}

impl OptimizerKind {
    pub const ADAM_DEFAULT: OptimizerKind = OptimizerKind::Adam { beta2: 0.99, eps: 1e-8 };
    pub const ADAGRAD_DEFAULT: OptimizerKind = OptimizerKind::AdaGrad { eps: 1e-8 };

    pub fn validate(&self) -> Result<()> {
        match *self {
            OptimizerKind::Adam { beta2, eps } if !(0.0..1.0).contains(&beta2) || !(eps > 0.0) => Err(
                Error::InvalidArgument(format!("adam needs beta2 in [0, 1) and eps > 0, got {beta2}, {eps}")),
            ),
            OptimizerKind::AdaGrad { eps } if !(eps > 0.0) => {
                Err(Error::InvalidArgument(format!("adagrad needs eps > 0, got {eps}")))
            }
            _ => Ok(()),
        }
    }

    /// Whether the optimizer's own recipe forbids momentum.
    pub fn is_momentum_free(&self) -> bool {
        matches!(self, OptimizerKind::Sgd | OptimizerKind::AdaGrad { .. })
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::SgdMomentum => "sgd_momentum",
            OptimizerKind::Adam { .. } => "adam",
            OptimizerKind::AdaGrad { .. } => "adagrad",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "sgd_momentum" => Ok(OptimizerKind::SgdMomentum),
            "adam" => Ok(OptimizerKind::ADAM_DEFAULT),
            "adagrad" => Ok(OptimizerKind::ADAGRAD_DEFAULT),
            other => Err(Error::InvalidArgument(format!("unknown optimizer {other:?}"))),
        }
    }
}

/// Per-group optimizer buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T: Real = f64> {
    /// Completed Hessian evaluations.
    pub step: u64,
    /// Previous momentum gradient `g_hat_{t-1}`.
    pub momentum: Vec<T>,
    /// Adam: moving average of squared gradients. AdaGrad: running sum.
    pub second_moment: Vec<T>,
    /// Momentum factor used by the most recent Adam bias correction.
    pub beta_used: f64,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(len: usize) -> Self {
        OptimizerState {
            step: 0,
            momentum: vec![T::ZERO; len],
            second_moment: vec![T::ZERO; len],
            beta_used: 0.0,
        }
    }

    pub fn len(&self) -> usize {
        self.momentum.len()
    }

    pub fn is_empty(&self) -> bool {
        self.momentum.is_empty()
    }
}

/// Adam's diagonal Hessian estimate at step `t >= 1`:
/// `(1 - beta^t) * (sqrt(v_t / (1 - beta2^t)) + eps)` with
/// `v_t = (1 - beta2) g^2 + beta2 v_{t-1}`. Returns `(diag, v_t)`.
pub fn adam_hessian<T: Real>(
    g: &[T],
    second_moment: &[T],
    t: u64,
    beta: f64,
    beta2: f64,
    eps: f64,
) -> Result<(Vec<T>, Vec<T>)> {
    if t == 0 {
        return Err(Error::InvalidArgument("adam bias correction is undefined at t = 0".into()));
    }
    let t = i32::try_from(t).unwrap_or(i32::MAX);
    let correction1 = 1.0 - beta.powi(t);
    let correction2 = 1.0 - beta2.powi(t);
    let mut v = Vec::with_capacity(g.len());
    let mut h = Vec::with_capacity(g.len());
    for (&gi, &vi) in g.iter().zip(second_moment) {
        let gi = gi.to_f64();
        let vt = (1.0 - beta2) * gi * gi + beta2 * vi.to_f64();
        v.push(T::from_f64(vt));
        h.push(T::from_f64(correction1 * ((vt / correction2).sqrt() + eps)));
    }
    Ok((h, v))
}

/// Diagonal preconditioner for the current step. Updates the second-moment
/// buffer and advances `state.step`; `beta` is the momentum currently in
/// effect (it enters Adam's bias correction).
pub fn hessian_diag<T: Real>(kind: &OptimizerKind, state: &mut OptimizerState<T>, g: &[T], beta: f64) -> Result<Vec<T>> {
    if g.len() != state.len() {
        return Err(Error::Shape(format!("gradient of {} for state of {}", g.len(), state.len())));
    }
    let t = state.step + 1;
    let h = match *kind {
        OptimizerKind::Sgd | OptimizerKind::SgdMomentum => vec![T::ONE; g.len()],
        OptimizerKind::Adam { beta2, eps } => {
            let (h, v) = adam_hessian(g, &state.second_moment, t, beta, beta2, eps)?;
            state.second_moment = v;
            h
        }
        OptimizerKind::AdaGrad { eps } => {
            let e = T::from_f64(eps);
            state
                .second_moment
                .iter_mut()
                .zip(g)
                .map(|(s, &gi)| {
                    *s += gi * gi;
                    s.sqrt() + e
                })
                .collect()
        }
    };
    state.step = t;
    state.beta_used = beta;
    Ok(h)
}

/// `g_hat_t = (1 - gamma1 - gamma2) g_t + gamma2 g_hat_{t-1}`; the result
/// becomes the stored `g_hat_{t-1}` of the next step.
pub fn momentum_gradient<T: Real>(g: &[T], state: &mut OptimizerState<T>, gamma: Vec2) -> Vec<T> {
    let a = T::from_f64(1.0 - gamma.x() - gamma.y());
    let b = T::from_f64(gamma.y());
    let out: Vec<T> = g.iter().zip(&state.momentum).map(|(&gi, &pi)| a * gi + b * pi).collect();
    state.momentum.clone_from(&out);
    out
}

/// The same estimator in learning-rate/momentum form,
/// `g_hat_t = alpha ((1 - beta) g_t + beta g_hat_{t-1})`.
///
/// With `beta = 0` this is exactly `alpha * g_t`, so fixed-rate SGD
/// reproduces the textbook update bit for bit.
pub fn momentum_gradient_ab<T: Real>(g: &[T], state: &mut OptimizerState<T>, alpha: f64, beta: f64) -> Vec<T> {
    let a = T::from_f64(alpha);
    let keep = T::from_f64(1.0 - beta);
    let b = T::from_f64(beta);
    let out: Vec<T> = g
        .iter()
        .zip(&state.momentum)
        .map(|(&gi, &pi)| a * (keep * gi + b * pi))
        .collect();
    state.momentum.clone_from(&out);
    out
}

/// `w <- w - g_hat / hdiag`, elementwise.
pub fn apply_update<T: Real>(w: &mut [T], g_hat: &[T], hdiag: &[T]) -> Result<()> {
    if w.len() != g_hat.len() || w.len() != hdiag.len() {
        return Err(Error::Shape(format!(
            "update of {} weights with {} gradients and {} preconditioner entries",
            w.len(),
            g_hat.len(),
            hdiag.len()
        )));
    }
    if let Some(h) = hdiag.iter().find(|h| !(**h > T::ZERO)) {
        return Err(Error::InvalidArgument(format!("preconditioner entry {h} is not positive")));
    }
    for ((wi, &gi), &hi) in w.iter_mut().zip(g_hat).zip(hdiag) {
        *wi -= gi / hi;
    }
    if w.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite("updated weights".into()))
    }
}

/// One step with hand-set learning rate and momentum.
pub fn fixed_step<T: Real>(
    kind: &OptimizerKind,
    state: &mut OptimizerState<T>,
    w: &mut [T],
    g: &[T],
    alpha: f64,
    beta: f64,
) -> Result<()> {
    let h = hessian_diag(kind, state, g, beta)?;
    let g_hat = momentum_gradient_ab(g, state, alpha, beta);
    apply_update(w, &g_hat, &h)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_hessian_is_identity() {
        let mut s = OptimizerState::<f64>::new(3);
        let h = hessian_diag(&OptimizerKind::Sgd, &mut s, &[5.0, -1.0, 0.0], 0.3).unwrap();
        assert_eq!(h, vec![1.0; 3]);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn adam_zero_gradient_first_step() {
        let mut s = OptimizerState::<f64>::new(4);
        let kind = OptimizerKind::Adam { beta2: 0.99, eps: 1e-8 };
        let h = hessian_diag(&kind, &mut s, &[0.0; 4], 0.9).unwrap();
        for v in h {
            assert!((v - 1e-9).abs() < 1e-24, "{v}");
        }
    }

    #[test]
    fn adam_rejects_t_zero() {
        assert!(adam_hessian::<f64>(&[1.0], &[0.0], 0, 0.9, 0.99, 1e-8).is_err());
    }

    #[test]
    fn adam_matches_textbook_denominator() {
        // beta = 0 removes the first-moment correction; what is left is
        // sqrt(v_hat) + eps with the usual bias-corrected second moment.
        let mut s = OptimizerState::<f64>::new(1);
        let kind = OptimizerKind::Adam { beta2: 0.99, eps: 1e-8 };
        hessian_diag(&kind, &mut s, &[2.0], 0.0).unwrap();
        let h = hessian_diag(&kind, &mut s, &[1.0], 0.0).unwrap();
        let v = 0.01 * 1.0 + 0.99 * (0.01 * 4.0);
        let expect = (v / (1.0 - 0.99f64.powi(2))).sqrt() + 1e-8;
        assert!((h[0] - expect).abs() < 1e-15);
    }

    #[test]
    fn adagrad_first_step() {
        let mut s = OptimizerState::<f64>::new(2);
        let h = hessian_diag(&OptimizerKind::AdaGrad { eps: 1e-8 }, &mut s, &[3.0, 4.0], 0.0).unwrap();
        assert_eq!(h, vec![3.0 + 1e-8, 4.0 + 1e-8]);
    }

    #[test]
    fn adagrad_sum_is_nondecreasing() {
        let mut s = OptimizerState::<f64>::new(3);
        let kind = OptimizerKind::ADAGRAD_DEFAULT;
        let mut prev = s.second_moment.clone();
        for t in 0..20 {
            let g = [(t as f64).sin(), -(t as f64), 0.5];
            let h = hessian_diag(&kind, &mut s, &g, 0.0).unwrap();
            assert!(h.iter().all(|&v| v > 0.0));
            assert!(s.second_moment.iter().zip(&prev).all(|(a, b)| a >= b));
            prev = s.second_moment.clone();
        }
    }

    #[test]
    fn momentum_gradient_cases() {
        let mut s = OptimizerState::<f64>::new(2);
        assert_eq!(momentum_gradient(&[1.0, 2.0], &mut s, Vec2::ZERO), vec![1.0, 2.0]);
        assert_eq!(momentum_gradient(&[1.0, 2.0], &mut s, Vec2::new(1.0, 0.0)), vec![0.0, 0.0]);
        s.momentum = vec![0.0, 1.0];
        let out = momentum_gradient(&[1.0, 2.0], &mut s, Vec2::new(0.5, 0.25));
        assert_eq!(out, vec![0.25, 0.75]);
        assert_eq!(s.momentum, out);
    }

    #[test]
    fn learning_rate_form_matches_gamma_form() {
        let mut a = OptimizerState::<f64>::new(2);
        let mut b = OptimizerState::<f64>::new(2);
        a.momentum = vec![0.0, 1.0];
        b.momentum = vec![0.0, 1.0];
        // alpha = 1 - gamma1 = 0.5, beta = gamma2 / alpha = 0.5
        let x = momentum_gradient(&[1.0, 2.0], &mut a, Vec2::new(0.5, 0.25));
        let y = momentum_gradient_ab(&[1.0, 2.0], &mut b, 0.5, 0.5);
        assert_eq!(x, y);
    }

    #[test]
    fn apply_update_cases() {
        let mut w = vec![1.0, 1.0];
        apply_update(&mut w, &[0.0, 0.0], &[1.0, 1.0]).unwrap();
        assert_eq!(w, vec![1.0, 1.0]);
        apply_update(&mut w, &[2.0, 4.0], &[2.0, 4.0]).unwrap();
        assert_eq!(w, vec![0.0, 0.0]);
        assert!(apply_update(&mut w, &[1.0], &[1.0, 1.0]).is_err());
        assert!(apply_update(&mut w, &[1.0, 1.0], &[0.0, 1.0]).is_err());
        assert!(matches!(apply_update(&mut w, &[f64::MAX, 0.0], &[1e-300, 1.0]), Err(Error::NonFinite(_))));
    }

    #[test]
    fn fixed_sgd_is_textbook_sgd_bitwise() {
        let mut w = vec![0.3, -1.7, 2.2];
        let mut reference = w.clone();
        let mut s = OptimizerState::<f64>::new(3);
        let alpha = 0.01;
        for t in 0..50 {
            let g: Vec<f64> = w.iter().map(|v| v * 1.3 + (t as f64 * 0.7).cos()).collect();
            let gr: Vec<f64> = reference.iter().map(|v| v * 1.3 + (t as f64 * 0.7).cos()).collect();
            fixed_step(&OptimizerKind::Sgd, &mut s, &mut w, &g, alpha, 0.0).unwrap();
            for (r, gi) in reference.iter_mut().zip(&gr) {
                *r -= alpha * gi;
            }
        }
        assert_eq!(w, reference);
    }

    #[test]
    fn kinds_parse_and_validate() {
        assert_eq!("adam".parse::<OptimizerKind>().unwrap(), OptimizerKind::ADAM_DEFAULT);
        assert!("rmsprop".parse::<OptimizerKind>().is_err());
        assert!(OptimizerKind::Adam { beta2: 1.0, eps: 1e-8 }.validate().is_err());
        assert!(OptimizerKind::AdaGrad { eps: 0.0 }.validate().is_err());
    }
}
