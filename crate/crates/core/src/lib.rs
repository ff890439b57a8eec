//! Deep Laplacian eigenmaps.
//!
//! Graph and random-walk primitives with an exact spectral solver, plus the
//! neural counterpart: an MLP encoder trained on positive pairs with a trace
//! loss and a feature-decorrelation penalty, optionally with manifold mixup,
//! and evaluated by few-shot and linear probes on frozen embeddings.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the common choices.

pub mod checkpoint;
pub mod data;
pub mod encoder;
pub mod error;
pub mod fewshot;
pub mod graph;
pub mod loss;
pub mod mixup;
pub mod scalar;
pub mod spectral;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type WeightedGraph64 = graph::WeightedGraph<f64>;
pub type WeightedGraph32 = graph::WeightedGraph<f32>;
pub type MlpEncoder64 = encoder::MlpEncoder<f64>;
pub type MlpEncoder32 = encoder::MlpEncoder<f32>;
pub type Dataset64 = data::Dataset<f64>;
pub type Dataset32 = data::Dataset<f32>;
