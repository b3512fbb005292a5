//! Dual-stream ultrasound image classification kit.
//!
//! A self-contained implementation of a two-pathway convolutional classifier
//! for ultrasound-like grayscale images: a texture stream fed by
//! physics-informed augmentation, a boundary stream fed by Sobel edge maps,
//! cross-attention fusion of the two, and class-weighted focal-loss training
//! under stratified cross-validation — all on a small f64 tensor core with
//! reverse-mode automatic differentiation, verifiable at desk scale on a
//! built-in synthetic dataset.

pub mod aug;
pub mod data;
pub mod edge;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
