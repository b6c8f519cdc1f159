//! Minimal gated recurrent units (mGRU), their input-projection variant
//! (mGRUIP) and the temporal-convolution context module (mGRUIP-Ctx), with
//! every batch-normalization placement on the update gate and the ReLU
//! candidate, trained and verified end to end at desk scale.
//!
//! Layout:
//! - [`numerics`]: tensors, activations, batch normalization.
//! - [`cells`]: single-step forward/backward of each cell.
//! - [`context`]: `{K1×s1; K2×s2}` settings and frame splicing.
//! - [`network`]: stacked models, BPTT, latency, checkpoints.
//! - [`training`]: synthetic tasks, SGD, gradient checks, gate traces.

pub mod cells;
pub mod context;
pub mod error;
pub mod network;
pub mod numerics;
pub mod training;

pub use error::{Error, Result};
