//! Unified multi-camera 2D/3D object detection with a cyclic hybrid decoder,
//! trained and evaluated end-to-end on procedurally generated scenes.
//!
//! Core math is generic over the scalar type via [`real::Real`] (`f32` or
//! `f64`); `f64` is the default everywhere and the only type used for
//! training and gradient verification.

pub mod aggregation;
pub mod allocation;
pub mod attention;
pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod model;
pub mod real;
pub mod scene;
pub mod tensor;

pub use error::{Error, Result};
pub use real::Real;
pub use tensor::{Graph, TensorId};

/// Double-precision tape, the default.
pub type Graph64 = Graph<f64>;
/// Single-precision tape, forward passes only.
pub type Graph32 = Graph<f32>;
