//! Reference checks for the reverse pass: central finite differences and
//! explicit per-sample gradients.

use crate::error::Result;
use crate::rng::Rng;
use crate::tensor::Tensor;

use super::layer::LayerSpec;
use super::loss::nll_loss;
use super::network::{Mode, Network};

/// A small network with a batch and targets to check it on.
#[derive(Debug, Clone)]
pub struct CheckCase {
    pub name: &'static str,
    pub net: Network<f64>,
    pub input: Tensor<f64>,
    pub targets: Vec<usize>,
    pub mode: Mode,
}

fn case(
    name: &'static str,
    input_shape: &[usize],
    specs: &[LayerSpec],
    targets: &[usize],
    mode: Mode,
    rng: &mut Rng,
) -> Result<CheckCase> {
    let net = Network::new(input_shape, specs, rng)?;
    let mut shape = vec![targets.len()];
    shape.extend_from_slice(input_shape);
    Ok(CheckCase { name, net, input: rng.normal_tensor(&shape), targets: targets.to_vec(), mode })
}

/// Randomized small networks that between them use every layer kind, in
/// both orderings of relu and pooling.
pub fn layer_cases(rng: &mut Rng) -> Result<Vec<CheckCase>> {
    use LayerSpec::*;
    Ok(vec![
        case(
            "dense",
            &[5],
            &[Dense { out_features: 4 }, Relu, Dense { out_features: 3 }, LogSoftmax],
            &[0, 2, 1, 2],
            Mode::Eval,
            rng,
        )?,
        case(
            "conv_pool_dropout",
            &[2, 8, 8],
            &[
                Conv2d { out_channels: 3, kernel: 3 },
                MaxPool2d { kernel: 2 },
                Relu,
                Conv2d { out_channels: 2, kernel: 2 },
                Dropout { rate: 0.3 },
                Relu,
                Flatten,
                Dense { out_features: 4 },
                LogSoftmax,
            ],
            &[1, 3, 0],
            Mode::Train,
            rng,
        )?,
        case(
            "relu_before_pool",
            &[3, 7, 7],
            &[
                Conv2d { out_channels: 2, kernel: 3 },
                Relu,
                MaxPool2d { kernel: 2 },
                Flatten,
                Dense { out_features: 5 },
                Relu,
                Dense { out_features: 3 },
                LogSoftmax,
            ],
            &[2, 0],
            Mode::Eval,
            rng,
        )?,
    ])
}

fn loss_at(net: &Network<f64>, x: &Tensor<f64>, targets: &[usize], mode: Mode, seed: u64) -> Result<f64> {
    let (out, _) = net.forward(x, mode, &mut Rng::new(seed))?;
    nll_loss(&out, targets)
}

/// Relative error `|num - analytic| / |num|` per parameter tensor, with the
/// numerical gradient from central differences of step `h`. Dropout masks
/// are held fixed across evaluations.
pub fn finite_difference_errors(
    net: &mut Network<f64>,
    x: &Tensor<f64>,
    targets: &[usize],
    mode: Mode,
    h: f64,
) -> Result<Vec<(String, f64)>> {
    let seed = 99;
    let (_, cache) = net.forward(x, mode, &mut Rng::new(seed))?;
    let analytic = net.backward(&cache, targets, false)?.grads;
    let mut out = Vec::with_capacity(analytic.len());
    for (p, grad) in analytic.iter().enumerate() {
        let mut diff = 0.0;
        let mut scale = 0.0;
        for (j, &a) in grad.iter().enumerate() {
            let orig = net.params()[p].data[j];
            net.params_mut()[p].data[j] = orig + h;
            let up = loss_at(net, x, targets, mode, seed)?;
            net.params_mut()[p].data[j] = orig - h;
            let down = loss_at(net, x, targets, mode, seed)?;
            net.params_mut()[p].data[j] = orig;
            let num = (up - down) / (2.0 * h);
            diff += (num - a) * (num - a);
            scale += num * num;
        }
        out.push((net.params()[p].name.clone(), diff.sqrt() / scale.sqrt().max(1e-8)));
    }
    Ok(out)
}

/// Agreement of the streamed statistics with explicit per-sample gradients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerSampleCheck {
    /// Largest absolute gap between the mean per-sample gradient and the
    /// batch gradient.
    pub mean_error: f64,
    /// Largest relative gap between streamed and explicit
    /// `sum_i g_i^T D^-1 g_i` over random diagonal `D`.
    pub sumsq_error: f64,
}

pub fn per_sample_consistency(
    net: &Network<f64>,
    x: &Tensor<f64>,
    targets: &[usize],
    mode: Mode,
    rng: &mut Rng,
) -> Result<PerSampleCheck> {
    let (_, cache) = net.forward(x, mode, &mut rng.fork(0))?;
    let grads = net.backward(&cache, targets, true)?;
    let samples = net.materialize_per_sample_grads(&cache, targets, usize::MAX)?;
    let sq = grads.per_sample_sq.as_ref().expect("requested per-sample statistics");
    let n = targets.len() as f64;
    let mut check = PerSampleCheck { mean_error: 0.0, sumsq_error: 0.0 };
    for (p, batch) in grads.grads.iter().enumerate() {
        let (mut streamed, mut explicit) = (0.0, 0.0);
        for (j, &b) in batch.iter().enumerate() {
            let d = rng.uniform_range(0.2, 3.0);
            let mean = samples.iter().map(|s| s[p][j]).sum::<f64>() / n;
            check.mean_error = check.mean_error.max((mean - b).abs());
            explicit += samples.iter().map(|s| s[p][j] * s[p][j]).sum::<f64>() / d;
            streamed += sq[p][j] / d;
        }
        let rel = (streamed - explicit).abs() / explicit.abs().max(1e-300);
        check.sumsq_error = check.sumsq_error.max(rel);
    }
    Ok(check)
}
