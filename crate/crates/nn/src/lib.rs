//! A deliberately small neural-network toolkit for CPU training at desk scale.
//!
//! Everything here is single-sample oriented: a [`Network`] runs forward on one
//! `C×H×W` tensor at a time, caches what backward needs, and accumulates
//! parameter gradients into a [`Gradients`] buffer that the caller sums over a
//! batch in a fixed order. Fixed summation order is what makes training
//! bit-reproducible for a given seed.

pub mod checkpoint;
pub mod error;
pub mod layer;
pub mod loss;
pub mod network;
pub mod optim;
pub mod schedule;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use error::NnError;
pub use layer::LayerSpec;
pub use network::{ArchSpec, Gradients, Network, Trace};
pub use optim::{Optimizer, OptimizerKind};
pub use schedule::LrSchedule;
pub use tensor::Tensor;
