//! Experiment runner for AutoOpt training, grid search, the quadratic
//! oracle and self-checks.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod check;
pub mod config;
pub mod csv_out;
pub mod grid;
pub mod oracle;
pub mod train;
