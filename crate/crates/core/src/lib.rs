//! Bi-rotation angle alignment for binary neural networks.
//!
//! The crate provides the linear algebra for trace maximization over
//! orthogonal matrices, the alternating rotation optimizer, sign and
//! approximation utilities, a small training engine with binarized dense and
//! convolution layers, dataset loaders and diagnostic reports.

pub mod data;
pub mod error;
pub mod linalg;
pub mod metrics;
pub mod nn;
pub mod quantize;
pub mod rotation;
pub mod seed;

pub use error::{Error, Result};
