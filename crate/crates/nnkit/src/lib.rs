//! A small, deterministic neural-network toolkit.
//!
//! Everything here runs on the CPU over dense row-major [`Tensor`]s. A
//! [`Network`] is an ordered list of [`LayerSpec`]s plus their parameters;
//! [`Network::forward`] returns a [`ForwardCache`] that [`Network::backward`]
//! consumes to produce [`Gradients`]. Training (see [`train::fit`]) is plain
//! mini-batch SGD and is bit-reproducible for a fixed [`TrainConfig`].
//!
//! Networks are generic over [`Real`] so that the same code runs in `f32`
//! for training and `f64` for gradient checking.

pub mod checkpoint;
mod error;
pub mod layer;
pub mod loss;
mod network;
pub mod optim;
mod rng;
mod tensor;
pub mod train;

pub use error::{NnError, Result};
pub use layer::LayerSpec;
pub use network::{ForwardCache, Gradients, Mode, Network, Param};
pub use optim::{sgd_step, L1Scaling, TrainConfig};
pub use rng::RandomStream;
pub use tensor::{Real, Tensor};
