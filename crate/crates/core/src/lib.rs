//! Prefixed-outlier quantization toolkit for a small Llama-style decoder.
//!
//! The pipeline rotates a model, detects tokens that carry massive
//! activations, stores their keys/values as a full-precision prefix, then
//! calibrates and fine-tunes static quantizers with that prefix in place.

pub mod calibrate;
pub mod container;
pub mod corpus;
pub mod error;
pub mod finetune;
pub mod harness;
pub mod model;
pub mod outlier;
pub mod planted;
pub mod prefix;
pub mod quant;
pub mod rotation;
pub mod tensor;

pub use error::{Error, Result};
