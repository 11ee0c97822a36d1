//! Pattern-sparse convolution core.
//!
//! Everything in this crate is pure computation over in-memory values and
//! builds without `std` (only `alloc` is required). The `std` feature, on by
//! default, lets [`exec::execute_plan`] and [`exec::csr_execute`] run their
//! workers on OS threads; without it the same work partition runs
//! sequentially and produces bit-identical results.
//!
//! Module map:
//! - [`tensor`]: dense tensors, reference/im2col convolution, MAC accounting
//! - [`filter`], [`scp`]: filter algebra and the sparse convolution pattern derivation
//! - [`prune`], [`admm`], [`train`], [`data`]: pattern and connectivity pruning
//! - [`model`]: model graph, pruned layers, layer analysis and validation
//! - [`compiler`], [`exec`]: execution plans and the executors that run them

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod admm;
pub mod compiler;
pub mod data;
pub mod error;
pub mod exec;
pub mod filter;
pub mod model;
pub mod prune;
pub mod scp;
pub mod tensor;
pub mod train;
pub mod util;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
