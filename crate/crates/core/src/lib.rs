//! Denoising-training machinery for query-based, Bezier-curve text spotting.
//!
//! The crate covers ground-truth geometry, construction of noised denoising
//! queries, the group-isolating attention mask, bipartite matching with an
//! instability metric, the training losses, a small trainable decoder and a
//! synthetic curved-text scene generator.

pub mod assignment;
pub mod attn_mask;
pub mod decoder;
pub mod dn_queries;
pub mod error;
pub mod geometry;
pub mod losses;
pub mod synth;

pub use error::{Error, Result};
