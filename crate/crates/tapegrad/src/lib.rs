//! A small reverse-mode automatic differentiation engine for image tensors.
//!
//! Values live in a [`Graph`] (a tape); every operation appends a node and
//! returns a [`Var`] handle. [`Graph::backward`] walks the tape in reverse and
//! returns the gradients of a scalar node with respect to every node that was
//! created with `requires_grad`.
//!
//! Image tensors use a channel-major `[C, H, W]` layout with batch size one.
//! Convolution weights are `[out, in, k, k]`. The engine is generic over
//! `f32` and `f64` through the [`Float`] trait so that finite-difference
//! checks can run the exact same code path in double precision.

mod error;
mod float;
mod graph;
mod ops;
mod tensor;

pub use error::{Error, Result};
pub use float::Float;
pub use graph::{Gradients, Graph, Var};
pub use ops::{FilterKernel, Pad};
pub use tensor::{Spatial, Tensor};
