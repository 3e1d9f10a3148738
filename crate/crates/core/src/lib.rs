//! Lightweight video object tracker built around a temporally propagated
//! target token: a joint transformer encoder over template/search patches,
//! a single-layer fusion module that enhances the current token with stored
//! history, a quality-kept fixed-capacity token memory, and a multi-scale
//! prediction head that collapses to a single convolution for inference.
//!
//! Everything runs on a small self-contained tensor library with recorded
//! reverse-mode gradients, generic over `f32`/`f64`.

pub mod boxes;
pub mod config;
pub mod encoder;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod head;
pub mod image;
pub mod loss;
pub mod memory;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod sampler;
pub mod sequence;
pub mod synth;
pub mod tensor;
pub mod trainer;
pub mod verify;
pub mod weights;

pub use error::{Error, Result};
