//! Feature extraction for pseudo-labeling.
//!
//! A small classifier trained on a proxy split (images the extractor may
//! see; disjoint from the images being protected) provides penultimate
//! features. Those features feed clustering — and double as the default
//! perceptual-distance representation.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::core::ImageBatch;
use crate::nn::{build_classifier, softmax_ce, Adam, ImageClassifier, Mode};
use crate::util::rng::rng_for;
use crate::{Result, SegueError};

/// Training hyperparameters for pressing a classifier into extractor duty.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureExtractorConfig {
    pub arch: String,
    pub width: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for FeatureExtractorConfig {
    fn default() -> Self {
        FeatureExtractorConfig {
            arch: "cnn6".into(),
            width: 12,
            epochs: 10,
            batch_size: 64,
            lr: 1e-3,
        }
    }
}

/// A trained feature extractor.
pub struct FeatureExtractor {
    model: Box<dyn ImageClassifier>,
    pub train_accuracy: f64,
}

impl FeatureExtractor {
    /// Train on the proxy split. Deterministic in `(config, seed)`.
    pub fn train(
        proxy: &ImageBatch,
        num_classes: usize,
        config: &FeatureExtractorConfig,
        seed: u64,
    ) -> Result<Self> {
        if proxy.is_empty() {
            return Err(SegueError::Config("feature extractor needs a non-empty proxy".into()));
        }
        let mut model = build_classifier(
            &config.arch,
            num_classes,
            config.width,
            crate::util::rng::derive_seed(seed, "feature-extractor-init"),
        )?;
        let mut opt = Adam::new(config.lr);
        let mut order: Vec<usize> = (0..proxy.len()).collect();
        let mut rng = rng_for(seed, "feature-extractor-shuffle");
        for epoch in 0..config.epochs {
            rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
            for chunk in order.chunks(config.batch_size) {
                let batch = proxy.select(chunk);
                let logits = model.forward(&batch.pixels, Mode::Train);
                let (loss, dl) = softmax_ce(&logits.view(), &batch.labels);
                if !loss.is_finite() {
                    return Err(SegueError::Runtime(format!(
                        "feature extractor diverged at epoch {epoch} (loss {loss})"
                    )));
                }
                model.zero_grad();
                model.backward(&dl, false, true);
                opt.step(&mut model.params_mut());
            }
        }
        let logits = model.forward_inference(&proxy.pixels);
        let train_accuracy = crate::nn::accuracy(&logits.view(), &proxy.labels);
        Ok(FeatureExtractor { model, train_accuracy })
    }

    /// Penultimate features `[N, F]` for a batch.
    pub fn features(&self, batch: &ImageBatch) -> Array2<f64> {
        self.model.penultimate(&batch.pixels)
    }

    /// Feature dimension.
    pub fn dim(&mut self) -> usize {
        // The head weight is [F, K].
        self.model.params_mut().iter().rev().nth(1).map(|p| p.value.shape()[0]).unwrap_or(0)
    }
}

/// Convenience wrapper matching the call-site vocabulary: run a batch
/// through a trained extractor.
pub fn extract_features(extractor: &FeatureExtractor, batch: &ImageBatch) -> Array2<f64> {
    extractor.features(batch)
}
