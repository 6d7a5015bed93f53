//! Attacker-side evaluation harness: train classifiers on (possibly
//! unlearnable, possibly countermeasure-processed) datasets, score them on
//! clean test data, and compute the report metrics.

pub mod augment;
pub mod metrics;
pub mod plot;

pub use augment::{apply_augmentations, cutmix, cutout, gaussian_blur_batch, mixup, one_hot, Augmentation};
pub use metrics::{
    jpeg_preprocess, linear_separability_probe, psnr, ssim, FeatureSpaceMse, PerceptualMetric,
};
pub use plot::{write_line_chart, Series};

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::core::{load_dataset, Dataset, ImageBatch};
use crate::distortion::adversarial_step;
use crate::nn::{accuracy, build_classifier, softmax_ce_soft, Adam, ImageClassifier, Mode};
use crate::util::hash::sha256_hex;
use crate::util::io;
use crate::util::rng::{derive_seed, rng_for};
use crate::{Result, SegueError};

use rand::seq::SliceRandom;

/// Everything that defines one attacker run. Identical specs (including
/// the seed) produce identical reports, modulo wall-clock fields.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentSpec {
    /// Manifest path of the dataset whose train split the attacker sees.
    pub train_ref: String,
    /// Manifest path of the dataset providing the clean test split.
    /// Empty means "same as train_ref" (whose test split is clean by
    /// construction for every exporter in this crate).
    pub clean_ref: String,
    pub arch: String,
    /// Width multiplier; 0 picks the architecture default.
    pub width: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub augmentations: Vec<Augmentation>,
    /// Adversarial-training budget; 0 disables the inner attack.
    pub adv_train_rho: f64,
    pub adv_steps: usize,
    /// JPEG round-trip quality applied to the train split before training.
    pub jpeg_quality: Option<u8>,
    pub seed: u64,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        ExperimentSpec {
            train_ref: String::new(),
            clean_ref: String::new(),
            arch: "cnn6".into(),
            width: 0,
            epochs: 30,
            batch_size: 64,
            lr: 0.001,
            augmentations: Vec::new(),
            adv_train_rho: 0.0,
            adv_steps: 1,
            jpeg_quality: None,
            seed: 0,
        }
    }
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(SegueError::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(SegueError::Config("batch_size must be positive".into()));
        }
        if self.lr <= 0.0 {
            return Err(SegueError::Config("lr must be positive".into()));
        }
        if self.adv_train_rho < 0.0 {
            return Err(SegueError::Config("adv_train_rho must be non-negative".into()));
        }
        if self.adv_train_rho > 0.0 && self.adv_steps == 0 {
            return Err(SegueError::Config(
                "adv_steps must be positive when adversarial training is on".into(),
            ));
        }
        if let Some(q) = self.jpeg_quality {
            if !(1..=100).contains(&q) {
                return Err(SegueError::Config(format!("jpeg quality {q} outside 1..=100")));
            }
        }
        Ok(())
    }

    /// Content hash identifying this spec in reports and error messages.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("spec serializes");
        sha256_hex(json.as_bytes())[..16].to_string()
    }
}

/// One epoch of the attacker's learning curve.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackerEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    /// Argmax accuracy on the (augmented) train batches against the
    /// original hard labels — a coarse fit indicator.
    pub train_accuracy: f64,
    pub clean_test_accuracy: f64,
}

/// Fidelity and separability numbers attached to a report when the caller
/// has the clean/perturbed pair at hand.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricBlock {
    /// None encodes the identical-input infinity sentinel.
    pub psnr_db: Option<f64>,
    pub ssim: f64,
    pub perceptual: Option<f64>,
    pub perceptual_metric: Option<String>,
    pub probe_accuracy: Option<f64>,
}

/// Outcome of one attacker run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub spec: ExperimentSpec,
    pub spec_hash: String,
    /// Clean-test accuracy after the last epoch.
    pub final_accuracy: f64,
    /// Best clean-test accuracy over all epochs.
    pub best_accuracy: f64,
    pub curves: Vec<AttackerEpoch>,
    pub wall_seconds: f64,
    pub metrics: Option<MetricBlock>,
}

impl EvalReport {
    /// Digest of everything reproducible (wall-clock excluded).
    pub fn content_digest(&self) -> String {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(self.spec_hash.as_bytes());
        for v in [self.final_accuracy, self.best_accuracy] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        for e in &self.curves {
            bytes.extend_from_slice(&e.train_loss.to_le_bytes());
            bytes.extend_from_slice(&e.train_accuracy.to_le_bytes());
            bytes.extend_from_slice(&e.clean_test_accuracy.to_le_bytes());
        }
        sha256_hex(&bytes)
    }
}

/// Write a report as pretty JSON (atomic: temp file + rename).
pub fn write_report(report: &EvalReport, path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(report)
        .map_err(|e| SegueError::Runtime(format!("report serialization: {e}")))?;
    io::write_atomic(path, json.as_bytes())
}

/// Write the per-epoch curves as CSV next to the JSON report.
pub fn write_curves_csv(report: &EvalReport, path: &Path) -> Result<()> {
    let mut out = String::from("epoch,train_loss,train_accuracy,clean_test_accuracy\n");
    for e in &report.curves {
        out.push_str(&format!(
            "{},{},{},{}\n",
            e.epoch, e.train_loss, e.train_accuracy, e.clean_test_accuracy
        ));
    }
    io::write_atomic(path, out.as_bytes())
}

/// Fraction of argmax-correct predictions on a test batch, evaluated in
/// chunks with inference statistics. Ties resolve to the lowest index.
pub fn clean_test_accuracy(model: &dyn ImageClassifier, test: &ImageBatch) -> f64 {
    let n = test.len();
    if n == 0 {
        return 0.0;
    }
    let mut correct_weighted = 0.0;
    const CHUNK: usize = 256;
    let mut start = 0;
    while start < n {
        let end = (start + CHUNK).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let chunk = test.select(&idx);
        let logits = model.forward_inference(&chunk.pixels);
        correct_weighted += accuracy(&logits.view(), &chunk.labels) * (end - start) as f64;
        start = end;
    }
    correct_weighted / n as f64
}

/// Train an attacker per `spec`, loading datasets from the referenced
/// manifests: the train split from `train_ref`, the clean test split from
/// `clean_ref` (or from `train_ref` when empty).
pub fn train_attacker(spec: &ExperimentSpec) -> Result<(Box<dyn ImageClassifier>, EvalReport)> {
    spec.validate()?;
    if spec.train_ref.is_empty() {
        return Err(SegueError::Config("spec.train_ref must point at a dataset manifest".into()));
    }
    let train_ds = load_dataset(Path::new(&spec.train_ref))?;
    let clean_test = if spec.clean_ref.is_empty() || spec.clean_ref == spec.train_ref {
        train_ds.test.clone()
    } else {
        load_dataset(Path::new(&spec.clean_ref))?.test
    };
    train_attacker_on(&train_ds, &clean_test, spec)
}

/// [`train_attacker`] on datasets already in memory.
pub fn train_attacker_on(
    train_ds: &Dataset,
    clean_test: &ImageBatch,
    spec: &ExperimentSpec,
) -> Result<(Box<dyn ImageClassifier>, EvalReport)> {
    spec.validate()?;
    let hash = spec.hash();
    let started = Instant::now();

    let preprocessed;
    let ds = match spec.jpeg_quality {
        Some(q) => {
            preprocessed = jpeg_preprocess(train_ds, q)?;
            &preprocessed
        }
        None => train_ds,
    };
    let train = &ds.train;
    let n = train.len();
    if n == 0 {
        return Err(SegueError::Config("empty train split".into()));
    }
    let k = ds.num_classes;

    let mut model = build_classifier(&spec.arch, k, spec.width, derive_seed(spec.seed, "attacker-init"))?;
    let mut adam = Adam::new(spec.lr);
    let mut rng = rng_for(spec.seed, "attacker-train");

    let mut curves = Vec::with_capacity(spec.epochs);
    let mut best = 0.0f64;
    for epoch in 1..=spec.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut acc_weighted = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(spec.batch_size) {
            let batch = train.select(chunk);
            let mut x = batch.pixels;
            let y = batch.labels;

            if spec.adv_train_rho > 0.0 {
                let adv =
                    adversarial_step(model.as_mut(), &x, &y, spec.adv_train_rho, spec.adv_steps);
                let dev = (&adv - &x).iter().fold(0.0f64, |a, v| a.max(v.abs()));
                assert!(
                    dev <= spec.adv_train_rho + 1e-12,
                    "adversarial training step exceeded its budget: {dev} > {}",
                    spec.adv_train_rho
                );
                x = adv;
            }
            let mut targets = one_hot(&y, k);
            apply_augmentations(&spec.augmentations, &mut x, &mut targets, &mut rng);

            let logits = model.forward(&x, Mode::Train);
            let (loss, dlogits) = softmax_ce_soft(&logits.view(), &targets.view());
            if !loss.is_finite() {
                return Err(SegueError::Runtime(format!(
                    "non-finite attacker loss at epoch {epoch} (spec {hash})"
                )));
            }
            model.zero_grad();
            model.backward(&dlogits, false, true);
            adam.step(&mut model.params_mut());

            loss_sum += loss;
            acc_weighted += accuracy(&logits.view(), &y) * y.len() as f64;
            batches += 1;
        }
        let test_acc = clean_test_accuracy(model.as_ref(), clean_test);
        best = best.max(test_acc);
        curves.push(AttackerEpoch {
            epoch,
            train_loss: loss_sum / batches as f64,
            train_accuracy: acc_weighted / n as f64,
            clean_test_accuracy: test_acc,
        });
    }

    let report = EvalReport {
        spec: spec.clone(),
        spec_hash: hash,
        final_accuracy: curves.last().map(|e| e.clean_test_accuracy).unwrap_or(0.0),
        best_accuracy: best,
        curves,
        wall_seconds: started.elapsed().as_secs_f64(),
        metrics: None,
    };
    Ok((model, report))
}

/// Wall-clock timings of repeated runs of one method, reported with the
/// median that the efficiency comparisons quote.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MethodTiming {
    pub method: String,
    pub runs_seconds: Vec<f64>,
    pub median_seconds: f64,
}

/// Median of a non-empty slice (mean of the middle pair for even lengths).
pub fn median(xs: &[f64]) -> f64 {
    assert!(!xs.is_empty(), "median of an empty slice");
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Time `runs` executions of a dataset-production closure; the closure's
/// own output (files, arrays) is its business, only the wall clock is
/// recorded here.
pub fn time_method(
    name: &str,
    runs: usize,
    body: &mut dyn FnMut() -> Result<()>,
) -> Result<MethodTiming> {
    if runs == 0 {
        return Err(SegueError::Config("need at least one timing run".into()));
    }
    let mut runs_seconds = Vec::with_capacity(runs);
    for _ in 0..runs {
        let t = Instant::now();
        body()?;
        runs_seconds.push(t.elapsed().as_secs_f64());
    }
    let median_seconds = median(&runs_seconds);
    Ok(MethodTiming { method: name.into(), runs_seconds, median_seconds })
}
