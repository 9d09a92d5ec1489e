//! Domain generalization by disentangling three levels of feature
//! abstraction: a self-supervised encoder trained on stain/affine/resolution
//! augmentations, a domain-invariant encoder aligned through soft class
//! labels, and a domain-specific encoder trained to recognise the source
//! domain. Their features are decorrelated pairwise, concatenated behind
//! layer normalization, and the domain-specific path is refined with a
//! first-order meta-learning step.
//!
//! Everything runs on the small reverse-mode engine in [`tensor`].

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// Index loops keep the numeric kernels close to their formulas.
#![allow(clippy::needless_range_loop)]

pub mod augment;
pub mod datasets;
pub mod error;
pub mod eval;
pub mod harness;
pub mod losses;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Graph, Tensor, Var};
