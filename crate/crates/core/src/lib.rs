//! Reparameterizable multi-path convolution blocks ("golden cudgel" blocks)
//! and the two-branch segmentation network built from them.
//!
//! A block trains as N parallel 3×3→1×1 paths, one 1×1→1×1 path and an
//! optional batch-norm residual, each convolution followed by its own batch
//! norm. After training the whole block contracts into one 3×3 convolution
//! that computes the same function. [`reparam`] holds that algebra;
//! [`network`] assembles the S/M/L networks and [`train`] provides a
//! small reverse-mode training loop for desk-scale experiments.
//!
//! The crate is `no_std` and only needs `alloc`.
#![no_std]
#![deny(unsafe_op_in_unsafe_fn)]

extern crate alloc;
#[cfg(any(test, feature = "std"))]
extern crate std;

pub mod autograd;
pub mod blocks;
pub mod cost;
mod error;
pub mod exec;
pub mod network;
pub mod ops;
mod real;
pub mod reparam;
mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use real::{GemmDims, Real, Strided, StridedMut};
pub use tensor::{Dims, Tensor4};
