//! Multi-task dense prediction with bridge features.
//!
//! A shared convolutional encoder feeds per-task preliminary decoders. Task
//! pattern propagation couples the tasks' attention at the coarsest scale,
//! bridge feature extraction cross-attends generic features over every task's
//! tokens, and task feature refinement fuses the bridge feature back into each
//! task with hybrid dilated convolutions. Everything runs on the small
//! autodiff engine in [`tensor`].

pub mod bfe;
pub mod check;
pub mod data;
pub mod error;
pub mod eval;
pub mod io;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod tensor;
pub mod tfr;
pub mod tpp;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Graph, NodeId, ParamId, ParamStore, Real, Rng, Tensor};
