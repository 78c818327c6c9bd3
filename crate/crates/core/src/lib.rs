//! Progressive layer freezing for Vision Transformers pretrained with local
//! multi-scale masked image modeling.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`] and [`autodiff`]: dense `f64` tensors and a tape-based
//!   reverse-mode engine with explicit frozen boundaries.
//! - [`model`]: a freezable ViT encoder with per-tap decoder heads that
//!   rescale predictions to each supervision scale.
//! - [`objective`]: patch masking, HOG supervision targets and the
//!   mask-weighted multi-scale reconstruction loss.
//! - [`schedule`]: per-layer freeze times, cosine-annealed learning rates
//!   with linear warm-up, and schedule export.
//! - [`trainer`]: AdamW with per-layer learning rates, freeze/prune
//!   orchestration and the cost model that predicts the speedup.
//! - [`io`]: run configuration, datasets, checkpoints and report files.
//! - [`cli`]: the `vitfreeze` command line.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod cli;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod model;
pub mod objective;
pub mod schedule;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
