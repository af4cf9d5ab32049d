//! Gated product-of-experts variational autoencoder for multi-omics data,
//! with a spike-and-slab lasso prior on per-omic feature-to-factor loadings.
//!
//! Gradients are derived by hand and checked against finite differences; the
//! data-parallel kernels run on rayon behind the `parallel` feature and give
//! bit-identical results when run sequentially.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::needless_range_loop, clippy::too_many_arguments)]

pub mod data;
pub mod error;
pub mod eval;
pub mod interpret;
pub mod model;
pub mod numerics;
pub mod objective;
pub mod sparsity;
pub mod verify;

pub use error::{Error, Result};
