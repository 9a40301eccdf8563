//! Training and evaluation toolkit for a multimodal meme classifier head.
//!
//! The head consumes precomputed CLIP token embeddings (text) and a pooled
//! image embedding, runs the text through an LSTM and the image through a
//! fully-connected layer, fuses both branches and emits one sigmoid
//! probability for the binary misogyny task plus four independent sigmoid
//! probabilities for the overlapping sub-classes.
//!
//! Everything is written from scratch on plain `Vec` storage: kernels with
//! analytic backward passes, the model, Adam, metrics and the embedding
//! file format.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod cli;
pub mod dataset;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod metrics;
pub mod model;
pub mod real;
pub mod seed;
pub mod training;

pub use error::{Error, Result};
pub use real::Real;
