//! The quadratic testbed from the command line: analytic, brute-force and
//! controller estimates of the optimal `gamma`, side by side.

use anyhow::{Context, Result};
use autoopt::testbed::{Grid, OracleCase, QuadraticProblem};
use autoopt::{Rng, Vec2};
use nalgebra::DVector;
use serde::Serialize;

use crate::config::{ExperimentConfig, OracleConfig};
use crate::csv_out::{write_csv, ORACLE_COLUMNS, ORACLE_SCHEMA, SURFACE_COLUMNS, SURFACE_SCHEMA};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleRow {
    pub case: usize,
    pub dim: usize,
    pub batch: usize,
    pub analytic_gamma1: f64,
    pub analytic_gamma2: f64,
    pub brute_gamma1: f64,
    pub brute_gamma2: f64,
    pub estimate_gamma1: f64,
    pub estimate_gamma2: f64,
    pub max_cells_apart: f64,
    pub agree: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SurfaceRow {
    pub case: usize,
    pub gamma1: f64,
    pub gamma2: f64,
    pub mc_loss: f64,
    pub analytic_loss: f64,
}

#[derive(Debug, Clone, Default)]
pub struct OracleReport {
    pub rows: Vec<OracleRow>,
    pub surface: Vec<SurfaceRow>,
}

/// Componentwise agreement: within 5% of the larger magnitude or within one
/// grid step.
pub fn gammas_agree(a: Vec2, b: Vec2, step: f64) -> bool {
    (0..2).all(|i| {
        let d = (a.0[i] - b.0[i]).abs();
        d <= 0.05 * a.0[i].abs().max(b.0[i].abs()) || d <= step * (1.0 + 1e-9)
    })
}

/// Builds case `k` of the configured suite.
pub fn build_case(cfg: &OracleConfig, seed: u64, k: usize) -> Result<OracleCase> {
    let grid = Grid { step: cfg.grid_step, ..Grid::default() };
    let p = cfg.dims[k % cfg.dims.len()];
    let mut rng = Rng::with_stream(seed, 3 * k as u64);
    if cfg.noise_free {
        let problem = QuadraticProblem::random(p, 0.0, &mut rng)?;
        let w = problem.w_star() + DVector::from_fn(p, |_, _| rng.normal());
        let g_prev = DVector::from_fn(p, |_, _| rng.normal());
        return Ok(OracleCase { problem, w, g_prev, n: cfg.batch });
    }
    Ok(OracleCase::random(p, cfg.batch, (cfg.noise_lo, cfg.noise_hi), &grid, &mut rng)?)
}

/// Runs the three estimates for case `k`; also returns the brute-force
/// surface.
pub fn compare_case(cfg: &OracleConfig, seed: u64, k: usize) -> Result<(OracleRow, Vec<SurfaceRow>)> {
    let grid = Grid { step: cfg.grid_step, ..Grid::default() };
    let case = build_case(cfg, seed, k)?;
    let analytic = case.analytic()?;
    let brute = case.brute_force(&grid, cfg.draws, &mut Rng::with_stream(seed, 3 * k as u64 + 1))?;
    let estimate = case.mean_estimate(cfg.batches, 1e-8, &mut Rng::with_stream(seed, 3 * k as u64 + 2))?;
    let pairs = [(analytic.gamma, brute.gamma), (analytic.gamma, estimate), (brute.gamma, estimate)];
    let max_cells_apart = pairs
        .iter()
        .flat_map(|(a, b)| (0..2).map(move |i| (a.0[i] - b.0[i]).abs() / grid.step))
        .fold(0.0, f64::max);
    let agree = pairs.iter().all(|(a, b)| gammas_agree(*a, *b, grid.step));
    let row = OracleRow {
        case: k,
        dim: case.problem.dim(),
        batch: case.n,
        analytic_gamma1: analytic.gamma.x(),
        analytic_gamma2: analytic.gamma.y(),
        brute_gamma1: brute.gamma.x(),
        brute_gamma2: brute.gamma.y(),
        estimate_gamma1: estimate.x(),
        estimate_gamma2: estimate.y(),
        max_cells_apart,
        agree,
    };
    let surface = brute
        .surface
        .iter()
        .map(|&(g1, g2, mc)| SurfaceRow {
            case: k,
            gamma1: g1,
            gamma2: g2,
            mc_loss: mc,
            analytic_loss: QuadraticProblem::analytic_expected_loss(&analytic, Vec2::new(g1, g2)),
        })
        .collect();
    Ok((row, surface))
}

/// The `oracle` command: writes `oracle.csv` (one row per case) and
/// `surface.csv` (the expected-loss grid of case 0).
pub fn cmd_oracle(cfg: &ExperimentConfig) -> Result<OracleReport> {
    let seed = cfg.seeds[0];
    let mut report = OracleReport::default();
    for k in 0..cfg.oracle.cases {
        let (row, surface) = compare_case(&cfg.oracle, seed, k).with_context(|| format!("oracle case {k}"))?;
        if k == 0 {
            report.surface = surface;
        }
        report.rows.push(row);
    }
    std::fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
    write_csv(&cfg.out.join("oracle.csv"), ORACLE_SCHEMA, ORACLE_COLUMNS, &report.rows)?;
    write_csv(&cfg.out.join("surface.csv"), SURFACE_SCHEMA, SURFACE_COLUMNS, &report.surface)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn agreement_rule() {
        assert!(gammas_agree(Vec2::new(0.5, 0.1), Vec2::new(0.52, 0.1), 0.02));
        assert!(gammas_agree(Vec2::new(0.9, 0.0), Vec2::new(0.94, 0.0), 0.02));
        assert!(!gammas_agree(Vec2::new(0.2, 0.0), Vec2::new(0.25, 0.0), 0.02));
    }
}
