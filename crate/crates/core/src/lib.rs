//! Differentiable image synthesis with coordinate networks and a localized
//! Fourier output head.
//!
//! The crate provides a small reverse-mode autodiff graph, coordinate network
//! construction, the localized inverse DFT, perceptual feature extractors with
//! content and Gram style losses, and an L-BFGS optimizer.

pub mod container;
pub mod coordnet;
pub mod error;
pub mod fourier;
pub mod generator;
pub mod gradcheck;
pub mod graph;
mod ops;
pub mod optim;
pub mod perceptual;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{Graph, NodeId, OpKind};
pub use tensor::{DType, Real, Tensor};
