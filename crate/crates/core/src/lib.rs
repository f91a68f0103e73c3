//! Self-contained audio-visual representation learning at desk scale.
//!
//! Everything numeric lives here: a small reverse-mode autodiff engine over
//! dense `f64` tensors, log-mel audio tokenization, patch embeddings, masking
//! strategies, a multi-stream transformer with contrastive and reconstruction
//! objectives, an Adam training loop, and the evaluation + synthetic-data
//! machinery used to exercise all of it. The crate is `no_std` (with `alloc`)
//! so it stays portable; file formats and the CLI live in the companion
//! `cavmae` crate.

#![no_std]
#![deny(unsafe_code)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod error;
pub mod fmath;
pub mod graph;
pub mod gradcheck;
pub mod loss;
pub mod mask;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod patch;
pub mod pos;
pub mod rng;
pub mod spectrogram;
pub mod synth;
pub mod tensor;
pub mod trainer;
pub mod eval;

pub use error::{CoreError, Result};
pub use tensor::Tensor;
