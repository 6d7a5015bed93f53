//! In-memory image batches.

use ndarray::Array4;

use crate::{Result, SegueError};

/// A batch of images with labels: pixels `[N, C, H, W]` as `f64` in `[0,1]`.
///
/// Construction validates the value range and the label count, so the rest
/// of the crate can assume both. Labels are *not* range-checked here —
/// the owning [`crate::core::Dataset`] knows the class count and enforces
/// `label < num_classes` at load time.
#[derive(Debug, Clone)]
pub struct ImageBatch {
    pub pixels: Array4<f64>,
    pub labels: Vec<u32>,
}

impl ImageBatch {
    pub fn new(pixels: Array4<f64>, labels: Vec<u32>) -> Result<Self> {
        if pixels.dim().0 != labels.len() {
            return Err(SegueError::Config(format!(
                "batch has {} images but {} labels",
                pixels.dim().0,
                labels.len()
            )));
        }
        if let Some(bad) = pixels.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(SegueError::Config(format!(
                "pixel value {bad} outside [0,1]"
            )));
        }
        Ok(ImageBatch { pixels, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(C, H, W)` of a single image.
    pub fn image_shape(&self) -> (usize, usize, usize) {
        let (_, c, h, w) = self.pixels.dim();
        (c, h, w)
    }

    /// New batch with the rows at `indices`, in that order. Panics on an
    /// out-of-range index — callers own index validity.
    pub fn select(&self, indices: &[usize]) -> ImageBatch {
        let (_, c, h, w) = self.pixels.dim();
        let mut pixels = Array4::<f64>::zeros((indices.len(), c, h, w));
        let mut labels = Vec::with_capacity(indices.len());
        for (row, &i) in indices.iter().enumerate() {
            pixels
                .index_axis_mut(ndarray::Axis(0), row)
                .assign(&self.pixels.index_axis(ndarray::Axis(0), i));
            labels.push(self.labels[i]);
        }
        ImageBatch { pixels, labels }
    }
}
