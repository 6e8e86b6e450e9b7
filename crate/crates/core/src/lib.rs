//! Commonsense-violation scoring from LVLM-generated atomic facts.
//!
//! Facts for an image are encoded into token states by an external encoder
//! (or the built-in mock), mean-pooled per fact, combined with learned softmax
//! attention, and mapped to a single violation probability. The crate also
//! carries the training loop, cross-validation and transfer protocols, and
//! fact-set diagnostics.
//!
//! All numeric code is generic over [`Scalar`]; the aliases below fix the
//! element type to `f64`, which is what file loaders produce.

pub mod analysis;
pub mod embedding;
pub mod error;
pub mod evaluator;
pub mod interchange;
pub mod pooling;
pub mod scalar;
pub mod synthetic;
pub mod trainer;

pub use error::{Error, Result};
pub use interchange::{FactSet, Label};
pub use scalar::Scalar;

pub type EmbeddingBlock = interchange::EmbeddingBlock<f64>;
pub type EmbeddingBlock32 = interchange::EmbeddingBlock<f32>;
pub type ClassifierParams = pooling::ClassifierParams<f64>;
pub type ClassifierParams32 = pooling::ClassifierParams<f32>;
pub type ForwardTrace = pooling::ForwardTrace<f64>;
pub type FactVectors = pooling::FactVectors<f64>;
pub type Dataset = interchange::Dataset<f64>;
pub type Sample = interchange::Sample<f64>;
