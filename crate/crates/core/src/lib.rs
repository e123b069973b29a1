//! Pipeline-parallel training with two-stage backpropagation.
//!
//! The backward pass of every layer is split into backward-p1 (input
//! gradient, on the critical path between pipeline ranks) and backward-p2
//! (parameter gradient, deferrable). This crate provides the layers, the
//! schedule generator and validator, a threaded executor, and analysis
//! tools (closed-form bubble ratios, a discrete-event simulator, and
//! unit-based memory accounting).

pub mod analysis;
pub mod error;
pub mod executor;
pub mod layers;
pub mod model;
pub mod schedule;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{Element, Tensor};
