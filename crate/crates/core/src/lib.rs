//! One-step flow-map policies for offline-to-online reinforcement learning.

// Index loops mirror the math in the numeric kernels; negated comparisons
// deliberately reject NaN.
#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod critic;
pub mod diffcore;
pub mod envs;
mod error;
pub mod flowmap;
pub mod fmq;
pub mod harness;
pub mod qgbs;

pub use error::{Error, Result};
