//! Minimal dense neural-network engine.
//!
//! The crate's models (perturbation generator, surrogate and attacker
//! classifiers) are small enough that a hand-rolled layer-wise engine in
//! `f64` is the right tool: every layer implements an explicit forward and
//! backward, gradients are exact, and finite-difference checks validate the
//! whole stack. Convolutions lower to matrix multiplication per sample;
//! everything is single-threaded and deterministic.
//!
//! Conventions:
//! - image tensors are `[N, C, H, W]` in standard (row-major) layout;
//! - feature matrices are `[N, F]`;
//! - layers cache what their backward needs when asked to, so pure
//!   inference never allocates caches;
//! - `backward` accumulates into `Param::g` (callers zero grads between
//!   steps) and optionally returns the input gradient.

pub mod layers;
pub mod loss;
pub mod models;
pub mod ops;
pub mod param;
#[cfg(test)]
pub(crate) mod testmodel;

pub use layers::{BatchNorm2d, Conv2d, ConvBlock, DwConv2d, Linear, ReLU, Tanh, Upsample2x};
pub use loss::{accuracy, softmax, softmax_ce, softmax_ce_soft};
pub use models::{build_classifier, ImageClassifier};
pub use param::{Adam, Init, Param};

/// Whether a forward pass uses batch statistics (training) or running
/// statistics (evaluation). Only batch normalization distinguishes the two,
/// but the mode travels through every layer so composites stay uniform.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}
