//! Mixture-of-experts transformer building blocks with reverse-mode autodiff.
//!
//! The crate is `no_std` (with `alloc`): a dense tensor type with a
//! reverse-mode tape, transformer constituents, sparse top-k routing with
//! linear and cosine routers, the importance/load balancing losses, model
//! assembly (GMoE/ViT, MLP, FCN), the synthetic distribution-shift datasets,
//! a deterministic Adam training loop and routing telemetry.
//!
//! File formats, configuration and the command line live in the `gmoe` crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod autograd;
pub mod error;
pub mod experiments;
pub mod gradsuite;
pub mod losses;
pub mod model;
pub mod moe;
pub mod nn;
pub mod rng;
pub mod scalar;
pub mod synthetic;
pub mod telemetry;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;
