//! Attribute-steered generation for small causal transformers.
//!
//! The crate trains sets of per-attribute key/value prefixes against a frozen
//! decoder, supporting supervised, unsupervised and semi-supervised regimes,
//! plus synthetic attribute corpora with exact oracle classifiers and an
//! evaluation harness.
//!
//! Everything numeric is generic over [`scalar::Scalar`], so the same code
//! runs in f32 for training/storage and f64 for gradient checks.

pub mod bank;
pub mod config;
pub mod error;
pub mod objectives;
pub mod graph;
pub mod model;
pub mod rng;
pub mod sampling;
pub mod scalar;
pub mod store;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};

/// f32 tensor, the training and storage precision.
pub type Tensor32 = tensor::Tensor<f32>;
/// f64 tensor, the gradient-check and oracle precision.
pub type Tensor64 = tensor::Tensor<f64>;

/// f32 decoder, the training and storage precision.
pub type Model32 = model::TransformerLm<f32>;
/// f64 decoder for gradient checks and reference forwards.
pub type Model64 = model::TransformerLm<f64>;
/// f32 sequence encoder.
pub type Encoder32 = model::Encoder<f32>;
/// f64 sequence encoder.
pub type Encoder64 = model::Encoder<f64>;
