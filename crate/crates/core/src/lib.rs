//! Structural-similarity unfolding for lightweight single-image
//! super-resolution.
//!
//! The crate contains:
//! - [`hqs`]: a classical half-quadratic-splitting solver for the
//!   structurally constrained sparse-coding problem the network unfolds,
//!   with a coordinate-descent LASSO reference;
//! - [`nn`] and [`blocks`]: a small differentiable tensor graph and the
//!   gating, sparse-attention and expert-fusion blocks built on it;
//! - [`model`], [`data`], [`train`], [`eval`]: the network, the bicubic
//!   degradation pipeline, training and benchmark evaluation;
//! - [`config`] and [`checkpoint`]: run configuration and model archives.

pub mod blocks;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod hqs;
pub mod model;
pub mod nn;
pub mod train;

pub use error::{Error, Result};
pub use model::{SsiuConfig, SsiuModel};

/// A channel-major RGB (or single-plane) raster with values nominally in
/// `[0, 1]`.
pub type Image = ndarray::Array3<f64>;
/// A `C×H×W` feature tensor.
pub type FeatureMap = ndarray::Array3<f64>;
