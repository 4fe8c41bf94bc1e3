//! Contextual cross-modal attention for audio-visual forgery detection and
//! temporal localization, on per-sequence feature matrices.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix it to `f64`, which is what training, checkpoints and the CLI use.

pub mod attention;
pub mod data;
pub mod encoder;
pub mod error;
pub mod evaluate;
pub mod gradcheck;
pub mod graph;
pub mod io;
pub mod kv;
pub mod localize;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use graph::{Activation, Gradients, Var};
pub use scalar::Scalar;

pub type Tensor = tensor::Tensor<f64>;
pub type Graph<'a> = graph::Graph<'a, f64>;
pub type Model = model::Model<f64>;
