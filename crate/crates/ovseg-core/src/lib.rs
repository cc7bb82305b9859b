//! Open-vocabulary semantic segmentation via cost-volume aggregation.
//!
//! The pipeline embeds class names with a text encoder, correlates
//! them with dense image descriptors into a cosine cost volume, then
//! refines that volume with a class-agnostic aggregator before guided
//! upsampling back to input resolution. All tensor math is `f64` on
//! the CPU with hand-written backward passes; runs are deterministic
//! for a fixed seed.

pub mod agg;
pub mod backbone;
pub mod checkpoint;
pub mod cost;
pub mod error;
pub mod eval;
pub mod imageio;
pub mod infer;
pub mod model;
pub mod nn;
pub mod train;
pub mod upsample;
pub mod vocab;

pub use error::{Error, Result};
