//! Superpixel transformer for semantic segmentation.
//!
//! Pipeline: a small convolutional encoder produces hypercolumn features at
//! stride 8 ([`backbone`]); local dual-path cross-attention turns them into a
//! grid of superpixel tokens ([`tokenizer`]); global self-attention classifies
//! the tokens ([`classifier`]); a soft pixel/superpixel association unfolds the
//! superpixel logits back to dense labels ([`assoc`]). [`ssn`] holds the
//! differentiable SLIC iteration used as a reference clusterer.

#![allow(clippy::should_implement_trait, clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod assoc;
pub mod autodiff;
pub mod backbone;
pub mod classifier;
mod error;
pub mod model;
pub mod params;
pub mod pipeline;
pub mod pnm;
pub mod rng;
pub mod ssn;
pub mod tokenizer;

pub use error::{Error, Result};
