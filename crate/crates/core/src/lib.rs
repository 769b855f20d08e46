//! Embedding-aligned zero-shot object detection at desk scale.
//!
//! A detector emits an embedding per box; classification is the scaled
//! cosine softmax against a fixed matrix of averaged prompt embeddings.
//! Image-label-only samples contribute through pseudo ground-truth boxes.

// Range checks are written as `!(x > 0.0)` so that NaN fails them.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod embedding;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod geometry;
pub mod inference;
pub mod loss;
pub mod model;
pub mod optim;
pub mod splits;
pub mod train;
pub mod weak;
pub mod world;

pub use error::{Error, Result};
