//! Zero-shot 3D lesion segmentation by aligning mask tokens with structured
//! attribute embeddings, trained on synthetic phantom volumes.

// Range checks are written as negated comparisons so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod alignment;
pub mod attributes;
pub mod backbone;
pub mod cmki;
pub mod error;
mod io;
pub mod layers;
pub mod maskdecoder;
pub mod metrics;
pub mod phantom;
pub mod pipeline;
#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
pub use malenia_tensor::Scalar;

/// Single-precision model, the training default.
pub type Malenia32 = pipeline::Malenia<f32>;
/// Double-precision model, used by gradient checks.
pub type Malenia64 = pipeline::Malenia<f64>;
