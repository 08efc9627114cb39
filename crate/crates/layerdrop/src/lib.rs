//! Toy-scale transformer training engine built around switchable blocks and
//! a progressive layer-drop schedule.
//!
//! The crate is organized as:
//!
//! - [`tensor`] / [`tape`]: dense tensors with a recorded operation tape and
//!   reverse-mode gradients;
//! - [`model`]: PostLN / PreLN / switchable block variants and full-model
//!   assembly (embeddings → blocks → masked-LM head), plus checkpoints;
//! - [`schedule`]: the time- and depth-dependent keep-probability schedule,
//!   gate sampling and expected-depth/FLOPs accounting;
//! - [`train`]: the masked-LM training loop (data pipeline, Adam, LR
//!   schedule, metrics);
//! - [`instrument`]: gradient-norm profiles, norm-preserving ratios,
//!   input/output similarity, lesioning and residual diagnostics;
//! - [`gradcheck`]: central-finite-difference oracles used by both the test
//!   suite and the `grad-check` CLI subcommand.

pub mod error;
pub mod flops;
pub mod gradcheck;
pub mod instrument;
pub mod kernels;
pub mod model;
pub mod rng;
pub mod scalar;
pub mod schedule;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::{Dtype, Scalar};
pub use tensor::Tensor;
