use std::io::Write;
use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;

pub const METRICS_SCHEMA: &str = "# autoopt-metrics v1";
pub const METRICS_COLUMNS: &[&str] = &["seed", "epoch", "step", "train_loss", "train_error", "test_error", "wall_time_s"];
pub const TRACE_SCHEMA: &str = "# autoopt-trace v1";
pub const TRACE_COLUMNS: &[&str] =
    &["seed", "step", "group", "alpha", "beta", "gamma1", "gamma2", "vhat", "a11", "a12", "a22", "flags"];
pub const GRID_SCHEMA: &str = "# autoopt-grid v1";
pub const GRID_COLUMNS: &[&str] = &[
    "alpha",
    "beta",
    "seeds",
    "diverged",
    "test_error_mean",
    "test_error_std",
    "train_error_mean",
    "train_error_std",
    "best",
];
pub const SURFACE_SCHEMA: &str = "# autoopt-surface v1";
pub const SURFACE_COLUMNS: &[&str] = &["case", "gamma1", "gamma2", "mc_loss", "analytic_loss"];
pub const ORACLE_SCHEMA: &str = "# autoopt-oracle v1";
pub const ORACLE_COLUMNS: &[&str] = &[
    "case",
    "dim",
    "batch",
    "analytic_gamma1",
    "analytic_gamma2",
    "brute_gamma1",
    "brute_gamma2",
    "estimate_gamma1",
    "estimate_gamma2",
    "max_cells_apart",
    "agree",
];

/// Writes a schema comment line, the column header and one record per row.
pub fn write_csv<R: Serialize>(path: &Path, schema: &str, columns: &[&str], rows: &[R]) -> Result<()> {
    let ctx = || format!("writing {}", path.display());
    let mut file = std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    writeln!(file, "{schema}").with_context(ctx)?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    w.write_record(columns).with_context(ctx)?;
    for r in rows {
        w.serialize(r).with_context(ctx)?;
    }
    w.flush().with_context(ctx)?;
    Ok(())
}
