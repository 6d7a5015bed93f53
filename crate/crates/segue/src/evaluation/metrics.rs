//! Report metrics: image fidelity (PSNR, SSIM, pluggable perceptual
//! distance), the linear-separability probe, and JPEG preprocessing.

use ndarray::{Array2, Array4, Axis};

use crate::core::{Dataset, ImageBatch};
use crate::distortion::gaussian_blur;
use crate::nn::{accuracy, softmax, softmax_ce_soft, ImageClassifier};
use crate::{Result, SegueError};

use super::augment::one_hot;

fn check_same_shape(a: &Array4<f64>, b: &Array4<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(SegueError::Config(format!(
            "image tensors differ in shape: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB for [0,1] images:
/// `10 log10(1 / MSE)`, with `f64::INFINITY` as the identical-input
/// sentinel.
pub fn psnr(a: &Array4<f64>, b: &Array4<f64>) -> Result<f64> {
    check_same_shape(a, b)?;
    let n = a.len();
    if n == 0 {
        return Err(SegueError::Config("psnr of empty tensors is undefined".into()));
    }
    let mse = a
        .iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n as f64;
    if mse == 0.0 {
        Ok(f64::INFINITY)
    } else {
        Ok(10.0 * (1.0 / mse).log10())
    }
}

/// Mean structural similarity over an 11x11 Gaussian window with sigma 1.5
/// and stability constants C1 = 0.01^2, C2 = 0.03^2, averaged over every
/// pixel position, channel, and image. Local statistics use
/// replicate-padded windows, which keeps the identical-image value at
/// exactly 1 everywhere including borders.
pub fn ssim(a: &Array4<f64>, b: &Array4<f64>) -> Result<f64> {
    check_same_shape(a, b)?;
    if a.len() == 0 {
        return Err(SegueError::Config("ssim of empty tensors is undefined".into()));
    }
    const C1: f64 = 0.01 * 0.01;
    const C2: f64 = 0.03 * 0.03;
    let window = (11, 11);
    let sigma = 1.5;

    let mu_a = gaussian_blur(a, window, sigma);
    let mu_b = gaussian_blur(b, window, sigma);
    let aa = gaussian_blur(&(a * a), window, sigma);
    let bb = gaussian_blur(&(b * b), window, sigma);
    let ab = gaussian_blur(&(a * b), window, sigma);

    let mut total = 0.0;
    for i in 0..a.len() {
        let (ma, mb) = (mu_a.as_slice().unwrap()[i], mu_b.as_slice().unwrap()[i]);
        let va = aa.as_slice().unwrap()[i] - ma * ma;
        let vb = bb.as_slice().unwrap()[i] - mb * mb;
        let cov = ab.as_slice().unwrap()[i] - ma * mb;
        let num = (2.0 * ma * mb + C1) * (2.0 * cov + C2);
        let den = (ma * ma + mb * mb + C1) * (va + vb + C2);
        total += num / den;
    }
    Ok(total / a.len() as f64)
}

/// A pluggable perceptual distance (lower = more similar). The default
/// implementation below measures mean squared distance in a trained
/// extractor's feature space; an external learned metric can slot in
/// through the same interface.
pub trait PerceptualMetric {
    fn name(&self) -> &'static str;
    fn distance(&self, a: &Array4<f64>, b: &Array4<f64>) -> Result<f64>;
}

/// Feature-space MSE: flatten both batches through the extractor's
/// penultimate representation and average the squared differences.
pub struct FeatureSpaceMse<'a> {
    pub extractor: &'a dyn ImageClassifier,
}

impl PerceptualMetric for FeatureSpaceMse<'_> {
    fn name(&self) -> &'static str {
        "feature_mse"
    }

    fn distance(&self, a: &Array4<f64>, b: &Array4<f64>) -> Result<f64> {
        check_same_shape(a, b)?;
        let fa = self.extractor.penultimate(a);
        let fb = self.extractor.penultimate(b);
        let n = fa.len();
        if n == 0 {
            return Err(SegueError::Config("empty feature tensors".into()));
        }
        Ok(fa
            .iter()
            .zip(fb.iter())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / n as f64)
    }
}

/// Train a softmax regression on flattened residuals (200 full-batch
/// gradient steps at learning rate 0.1) and report its training accuracy.
/// High accuracy means the residuals alone linearly encode the labels —
/// the structural signature of an effective availability attack.
pub fn linear_separability_probe(
    residuals: &Array4<f64>,
    labels: &[u32],
    num_classes: usize,
) -> Result<f64> {
    let n = residuals.dim().0;
    if n != labels.len() {
        return Err(SegueError::Config(format!(
            "{} residuals for {} labels",
            n,
            labels.len()
        )));
    }
    if n == 0 {
        return Err(SegueError::Config("probe needs at least one residual".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y as usize >= num_classes) {
        return Err(SegueError::Config(format!(
            "label {bad} out of range for {num_classes} classes"
        )));
    }
    let f = residuals.len() / n;
    let x = residuals.to_shape((n, f)).expect("contiguous NCHW flattens").to_owned();
    let targets = one_hot(labels, num_classes);

    let mut w = Array2::<f64>::zeros((f, num_classes));
    let mut bias = ndarray::Array1::<f64>::zeros(num_classes);
    const STEPS: usize = 200;
    const LR: f64 = 0.1;
    for _ in 0..STEPS {
        let logits = x.dot(&w) + &bias;
        let (_, dlogits) = softmax_ce_soft(&logits.view(), &targets.view());
        let gw = x.t().dot(&dlogits);
        let gb = dlogits.sum_axis(Axis(0));
        w.zip_mut_with(&gw, |wv, &g| *wv -= LR * g);
        bias.zip_mut_with(&gb, |bv, &g| *bv -= LR * g);
    }
    let logits = x.dot(&w) + &bias;
    Ok(accuracy(&logits.view(), labels))
}

/// Round-trip every train image through a JPEG codec at the given quality;
/// the test split passes through untouched. Supported layouts are 3-channel
/// RGB and single-channel grayscale.
pub fn jpeg_preprocess(dataset: &Dataset, quality: u8) -> Result<Dataset> {
    if !(1..=100).contains(&quality) {
        return Err(SegueError::Config(format!(
            "jpeg quality {quality} outside 1..=100"
        )));
    }
    let (c, h, w) = dataset.image_size;
    if c != 1 && c != 3 {
        return Err(SegueError::Config(format!(
            "jpeg preprocessing supports 1 or 3 channels, got {c}"
        )));
    }
    let mut pixels = dataset.train.pixels.clone();
    for (i, mut img) in pixels.axis_iter_mut(Axis(0)).enumerate() {
        // Quantize to bytes in the image's native layout (HWC).
        let mut bytes = Vec::with_capacity(h * w * c);
        for y in 0..h {
            for xx in 0..w {
                for ch in 0..c {
                    let v = (img[[ch, y, xx]].clamp(0.0, 1.0) * 255.0).round() as u8;
                    bytes.push(v);
                }
            }
        }
        let codec_err = |stage: &str, e: String| {
            SegueError::Runtime(format!(
                "jpeg {stage} failed on train image {i} of '{}': {e}",
                dataset.name
            ))
        };
        let mut encoded = Vec::new();
        let mut encoder =
            image::codecs::jpeg::JpegEncoder::new_with_quality(&mut encoded, quality);
        let color = if c == 3 {
            image::ExtendedColorType::Rgb8
        } else {
            image::ExtendedColorType::L8
        };
        encoder
            .encode(&bytes, w as u32, h as u32, color)
            .map_err(|e| codec_err("encode", e.to_string()))?;
        let decoded = image::load_from_memory_with_format(&encoded, image::ImageFormat::Jpeg)
            .map_err(|e| codec_err("decode", e.to_string()))?;
        if c == 3 {
            let rgb = decoded.to_rgb8();
            for y in 0..h {
                for xx in 0..w {
                    let p = rgb.get_pixel(xx as u32, y as u32);
                    for ch in 0..3 {
                        img[[ch, y, xx]] = p.0[ch] as f64 / 255.0;
                    }
                }
            }
        } else {
            let gray = decoded.to_luma8();
            for y in 0..h {
                for xx in 0..w {
                    img[[0, y, xx]] = gray.get_pixel(xx as u32, y as u32).0[0] as f64 / 255.0;
                }
            }
        }
    }
    Ok(Dataset {
        name: format!("{}-jpeg{quality}", dataset.name),
        train: ImageBatch::new(pixels, dataset.train.labels.clone())?,
        ..dataset.clone()
    })
}

/// Convenience: probability table of the probe's inputs (exposed for
/// diagnostics; the probe itself only reports accuracy).
pub fn probe_confidences(
    residuals: &Array4<f64>,
    labels: &[u32],
    num_classes: usize,
) -> Result<Array2<f64>> {
    let n = residuals.dim().0;
    if n != labels.len() || n == 0 {
        return Err(SegueError::Config("residual/label count mismatch".into()));
    }
    let f = residuals.len() / n;
    let x = residuals.to_shape((n, f)).expect("contiguous NCHW flattens").to_owned();
    let targets = one_hot(labels, num_classes);
    let mut w = Array2::<f64>::zeros((f, num_classes));
    let mut bias = ndarray::Array1::<f64>::zeros(num_classes);
    for _ in 0..200 {
        let logits = x.dot(&w) + &bias;
        let (_, dlogits) = softmax_ce_soft(&logits.view(), &targets.view());
        let gw = x.t().dot(&dlogits);
        let gb = dlogits.sum_axis(Axis(0));
        w.zip_mut_with(&gw, |wv, &g| *wv -= 0.1 * g);
        bias.zip_mut_with(&gb, |bv, &g| *bv -= 0.1 * g);
    }
    let logits = x.dot(&w) + &bias;
    Ok(softmax(&logits.view()))
}
