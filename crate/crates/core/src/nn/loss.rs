use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Mean negative log-likelihood of `targets` under per-row log-probabilities.
pub fn nll_loss<T: Real>(logprobs: &Tensor<T>, targets: &[usize]) -> Result<f64> {
    let [n, classes] = logprobs.shape()[..] else {
        return Err(Error::Shape(format!("expected [N, C] log-probabilities, got {:?}", logprobs.shape())));
    };
    if targets.len() != n {
        return Err(Error::Shape(format!("{} targets for {n} rows", targets.len())));
    }
    let mut total = 0.0;
    for (row, &t) in logprobs.data().chunks_exact(classes).zip(targets) {
        if t >= classes {
            return Err(Error::IndexOutOfRange { index: t, len: classes });
        }
        total -= row[t].to_f64();
    }
    Ok(total / n as f64)
}

/// Number of rows whose arg-max differs from the target.
pub fn misclassified<T: Real>(logprobs: &Tensor<T>, targets: &[usize]) -> usize {
    let classes = logprobs.shape()[1];
    logprobs
        .data()
        .chunks_exact(classes)
        .zip(targets)
        .filter(|(row, &t)| {
            let best = row
                .iter()
                .enumerate()
                .fold(0, |b, (j, &v)| if v > row[b] { j } else { b });
            best != t
        })
        .count()
}
