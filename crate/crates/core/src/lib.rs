//! AutoOpt: per-layer automatic learning-rate and momentum tuning for
//! stochastic-gradient optimizers, with a small CNN engine that streams the
//! per-sample gradient statistics the controller needs.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod controller;
pub mod data;
pub mod error;
pub mod linalg;
pub mod nn;
pub mod optim;
pub mod real;
pub mod rng;
pub mod tensor;
pub mod testbed;

pub use error::{Error, Result};
pub use linalg::{solve2, Mat2, Vec2};
pub use real::Real;
pub use rng::Rng;
pub use tensor::Tensor;
