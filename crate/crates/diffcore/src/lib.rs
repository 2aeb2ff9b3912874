//! Reverse-mode differentiation over a fixed set of primitives: 2-D
//! convolutions (plain and transposed), linear layers, instance
//! normalization, dropout, the usual activations, and the softmax family.
//!
//! A [`Graph`] is built per forward pass; [`Graph::backward`] fills in the
//! gradients of every node that depends on a trainable leaf.

mod adam;
mod backward;
mod error;
mod gradcheck;
mod graph;
pub mod kernels;
mod suite;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use error::{Error, Result};
pub use gradcheck::{grad_check, grad_check_random, random_inputs, GradCheckOptions, GradCheckReport};
pub use graph::{CustomOp, Graph, Mode, NodeId};
pub use suite::{primitive_suite, weighted_sum, SuiteEntry, PRIMITIVE_TOLERANCE};
pub use tensor::Tensor;
