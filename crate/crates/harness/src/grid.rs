//! Fixed-hyperparameter grid search over learning rate and momentum.

use anyhow::{bail, Context, Result};
use serde::Serialize;

use crate::config::{ExperimentConfig, RunMode};
use crate::csv_out::{write_csv, GRID_COLUMNS, GRID_SCHEMA, METRICS_COLUMNS, METRICS_SCHEMA};
use crate::train::{prepare_data, run_seeds, MetricsRecord, Prepared};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridRow {
    pub alpha: f64,
    pub beta: f64,
    pub seeds: usize,
    /// Seeds whose run diverged; they are left out of the statistics.
    pub diverged: usize,
    pub test_error_mean: f64,
    pub test_error_std: f64,
    pub train_error_mean: f64,
    pub train_error_std: f64,
    pub best: bool,
}

#[derive(Debug, Clone, Default)]
pub struct GridReport {
    pub rows: Vec<GridRow>,
    /// Per-epoch metrics of every cell, in row order.
    pub cells: Vec<Vec<MetricsRecord>>,
}

impl GridReport {
    pub fn best(&self) -> Option<&GridRow> {
        self.rows.iter().find(|r| r.best)
    }
}

/// Mean and sample standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Runs every `(alpha, beta, seed)` cell in fixed mode on already prepared
/// data. Divergent seeds are counted rather than aborting the grid.
pub fn run_grid(cfg: &ExperimentConfig, data: &Prepared) -> Result<GridReport> {
    if cfg.grid_alphas.is_empty() || cfg.grid_betas.is_empty() {
        bail!("grid search needs at least one alpha and one beta");
    }
    let mut report = GridReport::default();
    for &alpha in &cfg.grid_alphas {
        for &beta in &cfg.grid_betas {
            let mut cell_cfg = cfg.clone();
            cell_cfg.mode = RunMode::Fixed;
            cell_cfg.alpha = alpha;
            cell_cfg.beta = beta;
            let mut test = Vec::new();
            let mut train = Vec::new();
            let mut metrics = Vec::new();
            let mut diverged = 0;
            for &seed in &cfg.seeds {
                cell_cfg.seeds = vec![seed];
                let (r, error) = run_seeds(&cell_cfg, data)?;
                match error {
                    Some(autoopt::Error::Divergence { .. }) => diverged += 1,
                    Some(e) => return Err(e).with_context(|| format!("grid cell alpha={alpha} beta={beta}")),
                    None => {
                        test.extend(r.final_test_errors());
                        train.extend(r.final_train_errors());
                    }
                }
                metrics.extend(r.metrics);
            }
            let (test_error_mean, test_error_std) = mean_std(&test);
            let (train_error_mean, train_error_std) = mean_std(&train);
            report.rows.push(GridRow {
                alpha,
                beta,
                seeds: cfg.seeds.len(),
                diverged,
                test_error_mean,
                test_error_std,
                train_error_mean,
                train_error_std,
                best: false,
            });
            report.cells.push(metrics);
        }
    }
    let best = report
        .rows
        .iter()
        .enumerate()
        .filter(|(_, r)| r.diverged == 0 && r.test_error_mean.is_finite())
        .min_by(|a, b| a.1.test_error_mean.total_cmp(&b.1.test_error_mean))
        .map(|(i, _)| i);
    if let Some(i) = best {
        report.rows[i].best = true;
    }
    Ok(report)
}

#[derive(Serialize)]
struct CellMetrics {
    alpha: f64,
    beta: f64,
    seed: u64,
    epoch: usize,
    step: u64,
    train_loss: f64,
    train_error: f64,
    test_error: f64,
    wall_time_s: f64,
}

/// The `grid` command: writes `grid.csv` (one row per cell) and
/// `grid_metrics.csv` (per-epoch metrics of every run).
pub fn cmd_grid(cfg: &ExperimentConfig) -> Result<GridReport> {
    let data = prepare_data(&cfg.data)?;
    let report = run_grid(cfg, &data)?;
    std::fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
    write_csv(&cfg.out.join("grid.csv"), GRID_SCHEMA, GRID_COLUMNS, &report.rows)?;
    let cells: Vec<CellMetrics> = report
        .rows
        .iter()
        .zip(&report.cells)
        .flat_map(|(r, ms)| {
            ms.iter().map(move |m| CellMetrics {
                alpha: r.alpha,
                beta: r.beta,
                seed: m.seed,
                epoch: m.epoch,
                step: m.step,
                train_loss: m.train_loss,
                train_error: m.train_error,
                test_error: m.test_error,
                wall_time_s: m.wall_time_s,
            })
        })
        .collect();
    let mut columns = vec!["alpha", "beta"];
    columns.extend_from_slice(METRICS_COLUMNS);
    write_csv(&cfg.out.join("grid_metrics.csv"), METRICS_SCHEMA, &columns, &cells)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_std_cases() {
        assert_eq!(mean_std(&[2.0]), (2.0, 0.0));
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 2f64.sqrt()).abs() < 1e-15);
        assert!(mean_std(&[]).0.is_nan());
    }
}
