//! Hybrid early-fusion transformer for deepfake frame classification.
//!
//! Two convolutional feature extractors (a depthwise-separable stack and an
//! inverted-residual stack) each turn a face crop into a token sequence. The
//! sequences are concatenated, prefixed with a class token, given learnable
//! positional embeddings and passed through a transformer encoder whose
//! class-token output feeds a binary head. Videos are scored by averaging
//! per-frame probabilities.

pub mod augment;
pub mod backbones;
pub mod cli;
pub mod datapipe;
pub mod error;
pub mod evaluate;
pub mod fusion;
pub mod model;
pub mod numerics;
pub mod training;

pub use error::{Error, Result};
