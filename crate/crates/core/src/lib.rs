//! Siamese change detection on co-registered image pairs, built from
//! first principles: a tape-based autodiff tensor core, shuffled sparse
//! attention with learned sampling offsets, per-channel change-enhanced
//! feature fusion, a hierarchical encoder/decoder, and the training,
//! data-synthesis, and evaluation machinery around them.
//!
//! The heavy kernels are data-parallel via rayon when the default
//! `parallel` feature is enabled and fall back to identical sequential
//! loops without it; outputs are bit-identical either way.

pub mod attention;
pub mod augment;
pub mod checkpoint;
pub mod dataset;
pub mod element;
pub mod error;
pub mod flops;
pub mod fusion;
pub mod kernels;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod parallel;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;

pub use element::Element;
pub use error::{Error, Result};
pub use tape::{Tape, TensorId};
pub use tensor::Tensor;
