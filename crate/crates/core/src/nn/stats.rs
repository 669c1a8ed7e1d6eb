use crate::error::{Error, Result};
use crate::real::Real;

use super::network::{ForwardCache, Gradients, GroupSpec, Network};

/// Gradient statistics of one parameter group for one mini-batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchGradStats<T: Real = f64> {
    /// Mean of the per-sample gradients.
    pub batch_grad: Vec<T>,
    /// `sum_i (g_i)_j^2` for every coordinate `j`.
    pub per_sample_sq: Vec<f64>,
    pub sample_count: usize,
}

impl<T: Real> BatchGradStats<T> {
    /// `sum_i g_i^T H^-1 g_i` for the diagonal preconditioner `hdiag`.
    pub fn per_sample_sumsq(&self, hdiag: &[T]) -> f64 {
        self.per_sample_sq
            .iter()
            .zip(hdiag)
            .map(|(&s, &h)| s / h.to_f64())
            .sum()
    }

    /// Builds the statistics from explicitly listed per-sample gradients.
    pub fn from_samples(samples: &[Vec<T>]) -> Result<Self> {
        let n = samples.len();
        let p = samples.first().map_or(0, |s| s.len());
        if n == 0 || samples.iter().any(|s| s.len() != p) {
            return Err(Error::Shape("per-sample gradients must be nonempty and equal length".into()));
        }
        let mut sum = vec![0.0; p];
        let mut sq = vec![0.0; p];
        for s in samples {
            for ((a, q), &v) in sum.iter_mut().zip(sq.iter_mut()).zip(s) {
                let v = v.to_f64();
                *a += v;
                *q += v * v;
            }
        }
        Ok(BatchGradStats {
            batch_grad: sum.iter().map(|&v| T::from_f64(v / n as f64)).collect(),
            per_sample_sq: sq,
            sample_count: n,
        })
    }
}

/// Concatenates per-parameter gradients into per-group statistics.
pub fn group_stats<T: Real>(grads: &Gradients<T>, groups: &[GroupSpec]) -> Result<Vec<BatchGradStats<T>>> {
    let sq = grads
        .per_sample_sq
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("backward ran without per-sample statistics".into()))?;
    Ok(groups
        .iter()
        .map(|g| BatchGradStats {
            batch_grad: g.params.iter().flat_map(|&p| grads.grads[p].iter().copied()).collect(),
            per_sample_sq: g.params.iter().flat_map(|&p| sq[p].iter().copied()).collect(),
            sample_count: grads.sample_count,
        })
        .collect())
}

impl<T: Real> Network<T> {
    /// Concatenated parameter values of a group.
    pub fn gather(&self, group: &GroupSpec) -> Vec<T> {
        group.params.iter().flat_map(|&p| self.params()[p].data.iter().copied()).collect()
    }

    /// Writes a concatenated group vector back into its parameters.
    pub fn scatter(&mut self, group: &GroupSpec, values: &[T]) -> Result<()> {
        let total: usize = group.params.iter().map(|&p| self.params()[p].data.len()).sum();
        if total != values.len() {
            return Err(Error::Shape(format!("{} values for group {} of size {total}", values.len(), group.name)));
        }
        let mut offset = 0;
        for &p in &group.params {
            let dst = &mut self.params_mut()[p].data;
            let len = dst.len();
            dst.copy_from_slice(&values[offset..offset + len]);
            offset += len;
        }
        Ok(())
    }

    /// Reverse pass returning per-group gradient statistics. Quadratic forms
    /// against a diagonal preconditioner follow from
    /// [`BatchGradStats::per_sample_sumsq`] once the preconditioner is known.
    pub fn backward_grouped(
        &self,
        cache: &ForwardCache<T>,
        targets: &[usize],
        groups: &[GroupSpec],
    ) -> Result<Vec<BatchGradStats<T>>> {
        let grads = self.backward(cache, targets, true)?;
        group_stats(&grads, groups)
    }

    /// Every per-sample gradient, one full parameter set per sample.
    ///
    /// This is the explicit reference path for the streaming statistics and
    /// refuses networks with more than `ceiling` parameters.
    pub fn materialize_per_sample_grads(
        &self,
        cache: &ForwardCache<T>,
        targets: &[usize],
        ceiling: usize,
    ) -> Result<Vec<Vec<Vec<T>>>> {
        let count = self.param_count();
        if count > ceiling {
            return Err(Error::CeilingExceeded { count, ceiling });
        }
        if targets.len() != cache.batch() {
            return Err(Error::Shape(format!("{} targets for a batch of {}", targets.len(), cache.batch())));
        }
        (0..cache.batch())
            .map(|i| {
                let single = self.cache_sample(cache, i)?;
                Ok(self.backward(&single, &targets[i..i + 1], false)?.grads)
            })
            .collect()
    }
}
