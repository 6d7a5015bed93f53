//! Datasets on disk: a JSON manifest plus one PNG per image.
//!
//! The manifest is the single source of truth for shape, class count, and
//! the train/test partition. Image paths are relative to the manifest's
//! directory, so a dataset directory can be moved wholesale. Exports are
//! deterministic: identical pixels and manifest fields produce identical
//! bytes, which is what makes end-to-end runs reproducible.

use std::path::{Path, PathBuf};

use ndarray::Array4;
use serde::{Deserialize, Serialize};

use super::image::ImageBatch;
use crate::util::io;
use crate::{Result, SegueError};

pub const MANIFEST_FORMAT_VERSION: u32 = 1;

/// Which partition an image belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One image record in the manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub label: u32,
    pub split: Split,
    /// Largest |delta| applied to this image, present only in unlearnable
    /// exports.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_delta: Option<f64>,
}

/// Extra provenance carried by unlearnable exports: where the clean data
/// came from, what produced the perturbations, and the realized budget.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UnlearnableProvenance {
    pub source_manifest: String,
    pub generator_checkpoint: String,
    pub epsilon: f64,
    pub max_observed_delta: f64,
}

/// The on-disk manifest schema.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub name: String,
    pub num_classes: u32,
    /// `[C, H, W]`.
    pub image_size: [usize; 3],
    #[serde(flatten, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<UnlearnableProvenance>,
    pub entries: Vec<ManifestEntry>,
}

/// A dataset loaded into memory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    pub num_classes: usize,
    /// `(C, H, W)`.
    pub image_size: (usize, usize, usize),
    pub train: ImageBatch,
    pub test: ImageBatch,
    pub provenance: Option<UnlearnableProvenance>,
    /// Directory the manifest lives in (for provenance bookkeeping).
    pub root: PathBuf,
}

impl Dataset {
    /// Enforce the cross-field invariants that individual batches cannot
    /// check on their own.
    fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(SegueError::Config(format!(
                "dataset '{}' declares {} classes; need at least 2",
                self.name, self.num_classes
            )));
        }
        if self.train.is_empty() {
            return Err(SegueError::Config(format!(
                "dataset '{}' has an empty train split",
                self.name
            )));
        }
        for (split, batch) in [("train", &self.train), ("test", &self.test)] {
            if let Some(&bad) = batch.labels.iter().find(|&&l| l as usize >= self.num_classes) {
                return Err(SegueError::Config(format!(
                    "dataset '{}' {split} split has label {bad} >= num_classes {}",
                    self.name, self.num_classes
                )));
            }
            if !batch.is_empty() && batch.image_shape() != self.image_size {
                return Err(SegueError::Config(format!(
                    "dataset '{}' {split} split shape {:?} != declared {:?}",
                    self.name,
                    batch.image_shape(),
                    self.image_size
                )));
            }
        }
        Ok(())
    }
}

/// Read a manifest and every image it references.
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let text = io::read_text(manifest_path)?;
    let manifest: DatasetManifest = serde_json::from_str(&text)
        .map_err(|e| SegueError::format(manifest_path, format!("manifest JSON: {e}")))?;
    if manifest.format_version != MANIFEST_FORMAT_VERSION {
        return Err(SegueError::format(
            manifest_path,
            format!(
                "unsupported format_version {} (supported: {MANIFEST_FORMAT_VERSION})",
                manifest.format_version
            ),
        ));
    }
    let [c, h, w] = manifest.image_size;
    if c != 3 {
        return Err(SegueError::format(
            manifest_path,
            format!("only 3-channel images are supported, manifest declares C={c}"),
        ));
    }
    let root = manifest_path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .to_path_buf();

    let mut split_pixels: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
    let mut split_labels: [Vec<u32>; 2] = [Vec::new(), Vec::new()];
    for entry in &manifest.entries {
        let img_path = root.join(&entry.path);
        let img = image::open(&img_path)
            .map_err(|e| SegueError::format(&img_path, format!("image decode: {e}")))?
            .into_rgb8();
        if (img.width() as usize, img.height() as usize) != (w, h) {
            return Err(SegueError::format(
                &img_path,
                format!(
                    "image is {}x{}, manifest declares {w}x{h}",
                    img.width(),
                    img.height()
                ),
            ));
        }
        let si = match entry.split {
            Split::Train => 0,
            Split::Test => 1,
        };
        // Planar [C,H,W] from the interleaved RGB rows.
        let raw = img.as_raw();
        for ch in 0..3 {
            split_pixels[si].extend(
                (0..h * w).map(|p| raw[p * 3 + ch] as f64 / 255.0),
            );
        }
        split_labels[si].push(entry.label);
    }

    let make_batch = |pixels: Vec<f64>, labels: Vec<u32>| -> Result<ImageBatch> {
        let n = labels.len();
        let arr = Array4::from_shape_vec((n, 3, h, w), pixels)
            .map_err(|e| SegueError::Runtime(format!("batch assembly: {e}")))?;
        ImageBatch::new(arr, labels)
    };
    let [train_px, test_px] = split_pixels;
    let [train_lb, test_lb] = split_labels;
    let dataset = Dataset {
        name: manifest.name.clone(),
        num_classes: manifest.num_classes as usize,
        image_size: (c, h, w),
        train: make_batch(train_px, train_lb)?,
        test: make_batch(test_px, test_lb)?,
        provenance: manifest.provenance.clone(),
        root,
    };
    dataset.validate()?;
    Ok(dataset)
}

/// Encode one `[3,H,W]` image (values already on the 8-bit grid) as PNG
/// bytes.
fn encode_png(view: &ndarray::ArrayView3<f64>) -> Vec<u8> {
    let (_, h, w) = (view.shape()[0], view.shape()[1], view.shape()[2]);
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [
                (view[[0, y, x]] * 255.0).round() as u8,
                (view[[1, y, x]] * 255.0).round() as u8,
                (view[[2, y, x]] * 255.0).round() as u8,
            ];
            buf.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    let mut bytes = Vec::new();
    image::DynamicImage::ImageRgb8(buf)
        .write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
        .expect("in-memory PNG encoding cannot fail");
    bytes
}

/// Write a dataset directory: `manifest.json` plus `images/{train,test}/`.
///
/// `per_image_max_delta` annotates train entries of unlearnable exports;
/// pass `None` for clean datasets. Returns the manifest path.
pub fn write_dataset(
    out_dir: &Path,
    name: &str,
    num_classes: usize,
    train: &ImageBatch,
    test: &ImageBatch,
    provenance: Option<UnlearnableProvenance>,
    per_image_max_delta: Option<&[f64]>,
) -> Result<PathBuf> {
    let (c, h, w) = train.image_shape();
    let mut entries = Vec::with_capacity(train.len() + test.len());
    for (split, batch, dir) in [
        (Split::Train, train, "images/train"),
        (Split::Test, test, "images/test"),
    ] {
        for i in 0..batch.len() {
            let rel = format!("{dir}/{i:05}.png");
            let png = encode_png(&batch.pixels.index_axis(ndarray::Axis(0), i));
            io::write_atomic(&out_dir.join(&rel), &png)?;
            let max_delta = match (split, per_image_max_delta) {
                (Split::Train, Some(stats)) => Some(stats[i]),
                _ => None,
            };
            entries.push(ManifestEntry { path: rel, label: batch.labels[i], split, max_delta });
        }
    }
    let manifest = DatasetManifest {
        format_version: MANIFEST_FORMAT_VERSION,
        name: name.to_string(),
        num_classes: num_classes as u32,
        image_size: [c, h, w],
        provenance,
        entries,
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| SegueError::Runtime(format!("manifest serialization: {e}")))?;
    let manifest_path = out_dir.join("manifest.json");
    io::write_atomic(&manifest_path, json.as_bytes())?;
    Ok(manifest_path)
}

/// Export a protected dataset: perturbed train split, untouched test split,
/// provenance recorded in the manifest.
///
/// The perturbed train batch must already be quantized (the output of
/// [`super::perturb::apply_and_quantize`]); this function only arranges
/// bytes on disk.
pub fn export_unlearnable(
    source: &Dataset,
    perturbed_train: &ImageBatch,
    per_image_max_delta: &[f64],
    provenance: UnlearnableProvenance,
    out_dir: &Path,
) -> Result<PathBuf> {
    if perturbed_train.len() != source.train.len() {
        return Err(SegueError::Config(format!(
            "perturbed train has {} images, source has {}",
            perturbed_train.len(),
            source.train.len()
        )));
    }
    if perturbed_train.labels != source.train.labels {
        return Err(SegueError::Config(
            "perturbed train labels differ from source labels".into(),
        ));
    }
    write_dataset(
        out_dir,
        &format!("{}-unlearnable", source.name),
        source.num_classes,
        perturbed_train,
        &source.test,
        Some(provenance),
        Some(per_image_max_delta),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::core::quant::QuantizationPolicy;
    use ndarray::Array4;
    use rand::Rng;

    fn grid_batch(n: usize, hw: usize, seed: u64) -> ImageBatch {
        // Random pixels snapped to the 8-bit grid so PNG round-trips exactly.
        let mut rng = crate::util::rng::rng_for(seed, "dataset-test");
        let q = QuantizationPolicy::default();
        let pixels =
            Array4::from_shape_fn((n, 3, hw, hw), |_| q.quantize_value(rng.random::<f64>()));
        let labels = (0..n).map(|i| (i % 3) as u32).collect();
        ImageBatch::new(pixels, labels).unwrap()
    }

    #[test]
    fn write_then_load_round_trips_pixels_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let train = grid_batch(5, 8, 1);
        let test = grid_batch(4, 8, 2);
        let path =
            write_dataset(dir.path(), "toy", 3, &train, &test, None, None).unwrap();
        let ds = load_dataset(&path).unwrap();
        assert_eq!(ds.name, "toy");
        assert_eq!(ds.num_classes, 3);
        assert_eq!(ds.train.len(), 5);
        assert_eq!(ds.test.len(), 4);
        assert_eq!(ds.train.labels, train.labels);
        assert_eq!(ds.test.labels, test.labels);
        assert_eq!(ds.train.pixels, train.pixels, "train pixels must round-trip bit-exactly");
        assert_eq!(ds.test.pixels, test.pixels, "test pixels must round-trip bit-exactly");
        assert!(ds.provenance.is_none());
    }

    #[test]
    fn export_is_byte_deterministic() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let train = grid_batch(3, 8, 3);
        let test = grid_batch(2, 8, 4);
        let pa = write_dataset(dir_a.path(), "d", 3, &train, &test, None, None).unwrap();
        let pb = write_dataset(dir_b.path(), "d", 3, &train, &test, None, None).unwrap();
        assert_eq!(std::fs::read(&pa).unwrap(), std::fs::read(&pb).unwrap());
        assert_eq!(
            std::fs::read(dir_a.path().join("images/train/00000.png")).unwrap(),
            std::fs::read(dir_b.path().join("images/train/00000.png")).unwrap()
        );
    }

    #[test]
    fn unlearnable_export_carries_provenance_and_budget_stats() {
        let dir_src = tempfile::tempdir().unwrap();
        let dir_out = tempfile::tempdir().unwrap();
        let train = grid_batch(4, 8, 5);
        let test = grid_batch(2, 8, 6);
        let src_path =
            write_dataset(dir_src.path(), "toy", 3, &train, &test, None, None).unwrap();
        let src = load_dataset(&src_path).unwrap();

        let prov = UnlearnableProvenance {
            source_manifest: src_path.display().to_string(),
            generator_checkpoint: "ckpt-hash".into(),
            epsilon: 8.0 / 255.0,
            max_observed_delta: 0.03,
        };
        let deltas = vec![0.01, 0.02, 0.03, 0.0];
        let out_path =
            export_unlearnable(&src, &src.train, &deltas, prov, dir_out.path()).unwrap();

        let manifest: DatasetManifest =
            serde_json::from_str(&std::fs::read_to_string(&out_path).unwrap()).unwrap();
        let prov = manifest.provenance.expect("provenance must be present");
        assert_eq!(prov.generator_checkpoint, "ckpt-hash");
        assert!((prov.epsilon - 8.0 / 255.0).abs() < 1e-12);
        let train_entries: Vec<_> =
            manifest.entries.iter().filter(|e| e.split == Split::Train).collect();
        assert_eq!(train_entries.len(), 4);
        assert_eq!(train_entries[2].max_delta, Some(0.03));
        // Test entries are clean copies with no per-image delta.
        assert!(manifest
            .entries
            .iter()
            .filter(|e| e.split == Split::Test)
            .all(|e| e.max_delta.is_none()));

        let round = load_dataset(&out_path).unwrap();
        assert_eq!(round.test.pixels, src.test.pixels, "test split stays clean");
        assert!(round.provenance.is_some());
    }

    #[test]
    fn bad_label_and_bad_version_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let train = grid_batch(2, 4, 7);
        let test = grid_batch(1, 4, 8);
        let path = write_dataset(dir.path(), "bad", 3, &train, &test, None, None).unwrap();

        // Corrupt the label beyond num_classes.
        let mut manifest: DatasetManifest =
            serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        manifest.entries[0].label = 99;
        std::fs::write(&path, serde_json::to_string(&manifest).unwrap()).unwrap();
        assert!(load_dataset(&path).is_err(), "label >= num_classes must fail");

        manifest.entries[0].label = 0;
        manifest.format_version = 2;
        std::fs::write(&path, serde_json::to_string(&manifest).unwrap()).unwrap();
        let err = load_dataset(&path).unwrap_err();
        assert_eq!(err.exit_code(), 4, "unknown format version is a format error");
    }

    #[test]
    fn missing_image_file_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let train = grid_batch(2, 4, 9);
        let test = grid_batch(1, 4, 10);
        let path = write_dataset(dir.path(), "gone", 3, &train, &test, None, None).unwrap();
        std::fs::remove_file(dir.path().join("images/train/00001.png")).unwrap();
        assert!(load_dataset(&path).is_err());
    }
}
