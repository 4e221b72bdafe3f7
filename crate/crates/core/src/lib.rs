//! Toy dual-encoder laboratory for long-caption alignment.
//!
//! The crate provides a small trainable image/text dual encoder, the two
//! positional-embedding stretching procedures (fixed-ratio interpolation and
//! prefix-preserving interpolation), batch-PCA primary component extraction
//! with the fine/coarse contrastive objective, and the retrieval,
//! classification and effective-length evaluations used to compare them.

pub mod ablation;
pub mod data;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod numerics;
pub mod pcm;
pub mod stretch;
pub mod train;

pub use error::{Error, Result};
