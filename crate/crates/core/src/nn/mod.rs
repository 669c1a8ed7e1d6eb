//! Sequential CNN engine with per-sample gradient statistics.

mod arch;
pub mod gradcheck;
mod layer;
mod loss;
mod network;
mod stats;

pub use arch::{Architecture, DropoutRates};
pub use layer::LayerSpec;
pub use loss::{misclassified, nll_loss};
pub use network::{ForwardCache, Gradients, GroupSpec, Mode, Network, Param};
pub use stats::{group_stats, BatchGradStats};
