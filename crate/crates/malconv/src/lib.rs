//! Byte-level convolutional classifiers for very long inputs.
//!
//! Implements the MalConv architecture and a globally-gated variant
//! (MalConv with global channel gating), with two execution paths that
//! produce the same numbers: a dense reference path that materializes all
//! activations, and a fixed-memory path that finds each channel's pooling
//! winner with a chunked no-grad scan and then recomputes only the winning
//! receptive fields with gradient tracking. Peak activation memory of the
//! fixed-memory path is independent of input length.

pub mod bench;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod fixedmem;
pub mod gcg;
pub mod mem;
pub mod metrics;
pub mod models;
pub mod numerics;
pub mod optim;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use models::{Arch, LowmemOpts, Mode, Model, ModelConfig};
pub use tensor::Tensor;
