//! Normalization statistics versus affine parameters in hybrid adversarial training.
//!
//! The crate provides normalization layers whose statistics and affine parameters can be
//! shared or split between a clean and an adversarial branch, small convolutional
//! backbones built on them, l-infinity PGD attacks, the training regimes that combine
//! clean and adversarial losses, and test-time probes that re-estimate, swap and compare
//! per-branch statistics.

// Numeric kernels index several buffers in step; `!(x > 0.0)` checks also reject NaN.
#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod attacks;
pub mod checkpoint;
#[cfg(feature = "cli")]
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod loss;
pub mod models;
pub mod normcore;
pub mod probe;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
