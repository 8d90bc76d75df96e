//! Near-to-far self-supervised obstacle / free-space segmentation.
//!
//! Near-range depth is turned into per-pixel training labels by fitting a
//! ground plane and thresholding height above it. Those labels continuously
//! fine-tune a small encoder-decoder classifier that segments the whole
//! image, including the far range where depth is missing.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod camera;
pub mod dataset;
pub mod error;
pub mod ground_plane;
pub mod labels;
pub mod metrics;
pub mod network;
pub mod online;
pub mod pipeline;
pub mod synth;

pub use error::{Error, Result};
