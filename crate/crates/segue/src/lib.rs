//! Segue: a toolkit for making image datasets unlearnable.
//!
//! The crate trains a perturbation generator that maps an image (plus a
//! per-sample side-information code derived from labels or clustering) to a
//! bounded additive perturbation. Models trained on the perturbed images
//! latch onto the injected shortcut instead of the real content, so their
//! clean-test accuracy collapses. Alongside the generator the crate ships
//! optimization-based baselines, an attacker-side evaluation harness
//! (training, augmentations, compression, adversarial training), and
//! imperceptibility / separability metrics.
//!
//! Everything is deterministic given a seed: runs are reproducible down to
//! exported bytes.

pub mod baselines;
pub mod core;
pub mod distortion;
pub mod error;
pub mod evaluation;
pub mod generator;
pub mod nn;
pub mod side_info;
pub mod trainer;
pub mod util;

pub use error::{Result, SegueError};
