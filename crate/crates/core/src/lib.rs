//! Latent sequence decompositions.
//!
//! A sequence-to-sequence model emits word pieces from a fixed token space;
//! the segmentation of each target string into pieces is treated as latent.
//! This crate provides the token space and its decomposition lattice (with
//! exact small-scale oracles), an attention encoder-decoder with exact
//! gradients, the sampled-decomposition training loop, beam search decoding,
//! vocabulary construction, and an experiment harness.

pub mod decode;
pub mod error;
pub mod harness;
pub mod lattice;
pub mod model;
pub mod par;
pub mod real;
pub mod token;
pub mod train;
pub mod vocab;

pub use error::{LsdError, Result};
pub use model::{Model, ModelConfig, ParamSet, Tensor};
pub use real::{Precision, Real};
pub use token::{Decomposition, TokenId, Vocabulary};
