//! Variational autoencoders trained with negative samples, and the
//! out-of-distribution scoring built on them.
//!
//! The crate is self-contained: [`graph`] is a small reverse-mode autodiff
//! engine over dense `f64` tensors, [`nn`] and [`model`] build the encoder
//! and decoder on top of it, [`negative`] assembles the joint and
//! adversarial objectives, and [`train`] / [`eval`] drive experiments.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod distributions;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod negative;
pub mod run;
pub mod nn;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use tensor::{MathError, MathResult, Tensor};
