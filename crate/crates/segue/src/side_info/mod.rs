//! Side information: the per-sample code the generator conditions on.
//!
//! The code for a sample is the binary expansion of its (true or pseudo)
//! label, broadcast to constant spatial planes at the generator's
//! bottleneck. Pseudo labels come from clustering extracted features, for
//! the setting where the data owner has images but no labels.

pub mod accuracy;
pub mod features;
pub mod kmeans;

use std::path::Path;

use ndarray::{Array2, Array4};
use serde::{Deserialize, Serialize};

pub use accuracy::clustering_accuracy;
pub use features::{extract_features, FeatureExtractor, FeatureExtractorConfig};
pub use kmeans::{kmeans_cluster, KmeansConfig, KmeansResult};

use crate::core::ImageBatch;
use crate::util::io;
use crate::util::rng::derive_seed;
use crate::{Result, SegueError};

/// Number of bits in the default label code. 16 bits cover every class
/// count the toolkit supports.
pub const DEFAULT_LABEL_BITS: usize = 16;

/// Where per-sample labels for conditioning come from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum SideInfoSpec {
    /// Use the dataset's own labels.
    Labels,
    /// Cluster extracted features into `k` groups and use cluster ids.
    Cluster { k: usize },
}

impl SideInfoSpec {
    /// Parse the CLI form: `labels` or `cluster:K`.
    pub fn parse(s: &str) -> Result<Self> {
        if s == "labels" {
            return Ok(SideInfoSpec::Labels);
        }
        if let Some(k) = s.strip_prefix("cluster:") {
            let k: usize = k
                .parse()
                .map_err(|_| SegueError::Config(format!("bad cluster count in '{s}'")))?;
            if k < 2 {
                return Err(SegueError::Config("cluster count must be at least 2".into()));
            }
            return Ok(SideInfoSpec::Cluster { k });
        }
        Err(SegueError::Config(format!(
            "unknown side-info spec '{s}' (expected 'labels' or 'cluster:K')"
        )))
    }
}

/// Big-endian binary code of a label: bit 0 of the output is the most
/// significant bit. Label 5 with 16 bits is thirteen zeros followed by
/// `101`.
pub fn encode_label(label: u32, bits: usize) -> Result<Vec<f64>> {
    if bits == 0 || bits > 32 {
        return Err(SegueError::Config(format!("label code width {bits} out of range 1..=32")));
    }
    if bits < 32 && label >= (1u32 << bits) {
        return Err(SegueError::Config(format!(
            "label {label} does not fit in {bits} bits"
        )));
    }
    Ok((0..bits)
        .map(|i| {
            let shift = bits - 1 - i;
            ((label >> shift) & 1) as f64
        })
        .collect())
}

/// Encode a whole label vector into a `[N, bits]` matrix.
pub fn encode_labels(labels: &[u32], bits: usize) -> Result<Array2<f64>> {
    let mut out = Array2::<f64>::zeros((labels.len(), bits));
    for (i, &l) in labels.iter().enumerate() {
        let code = encode_label(l, bits)?;
        for (j, v) in code.into_iter().enumerate() {
            out[[i, j]] = v;
        }
    }
    Ok(out)
}

/// JSON-exportable record of one pseudo-labeling run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PseudoLabelReport {
    pub seed: u64,
    pub k: usize,
    pub labels: Vec<u32>,
    pub inertia: f64,
    /// Clustering accuracy against ground truth, when the caller has it.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub accuracy_vs_truth: Option<f64>,
    /// Fit quality of the extractor on its proxy split.
    pub extractor_train_accuracy: f64,
}

/// Save a pseudo-label report as pretty JSON (atomic write).
pub fn save_pseudo_report(report: &PseudoLabelReport, path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(report)
        .map_err(|e| SegueError::Runtime(format!("pseudo-label report serialization: {e}")))?;
    io::write_atomic(path, json.as_bytes())
}

/// The unsupervised scenario end to end: train a feature extractor on a
/// labeled proxy split (disjoint from the images being protected), embed
/// the target images, and k-means them into `k` pseudo-classes.
///
/// `truth` is optional ground truth for the target split; when present the
/// report carries clustering accuracy against it (the defender in the
/// unlabeled scenario would not have this — it is telemetry, not a gate).
pub fn pseudo_labels(
    target: &ImageBatch,
    proxy: &ImageBatch,
    proxy_classes: usize,
    k: usize,
    fx_config: &FeatureExtractorConfig,
    truth: Option<&[u32]>,
    seed: u64,
) -> Result<(Vec<u32>, PseudoLabelReport)> {
    if target.is_empty() {
        return Err(SegueError::Config("cannot pseudo-label an empty batch".into()));
    }
    let extractor = FeatureExtractor::train(
        proxy,
        proxy_classes,
        fx_config,
        derive_seed(seed, "pseudo-extractor"),
    )?;
    let features = extract_features(&extractor, target);
    let clusters = kmeans_cluster(&features, &KmeansConfig::new(k), derive_seed(seed, "pseudo-kmeans"))?;
    let accuracy_vs_truth = match truth {
        Some(t) => Some(clustering_accuracy(&clusters.assignments, t)?),
        None => None,
    };
    let report = PseudoLabelReport {
        seed,
        k,
        labels: clusters.assignments.clone(),
        inertia: clusters.inertia,
        accuracy_vs_truth,
        extractor_train_accuracy: extractor.train_accuracy,
    };
    Ok((clusters.assignments, report))
}

/// Broadcast codes `[N, B]` to constant feature planes `[N, B, h, w]`,
/// ready to concatenate with a bottleneck activation.
pub fn embedding_to_channels(codes: &Array2<f64>, h: usize, w: usize) -> Array4<f64> {
    let (n, b) = codes.dim();
    let mut out = Array4::<f64>::zeros((n, b, h, w));
    for i in 0..n {
        for j in 0..b {
            out.slice_mut(ndarray::s![i, j, .., ..]).fill(codes[[i, j]]);
        }
    }
    out
}
