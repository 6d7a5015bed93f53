//! Bounded perturbations and their application to images.

use ndarray::Array4;

use super::image::ImageBatch;
use super::quant::QuantizationPolicy;
use crate::{Result, SegueError};

/// An additive perturbation under an L-infinity budget.
///
/// The invariant `max |delta| <= epsilon` holds from construction on;
/// [`clip_perturbation`] is the one place that enforces it.
#[derive(Debug, Clone)]
pub struct Perturbation {
    delta: Array4<f64>,
    epsilon: f64,
}

impl Perturbation {
    /// Wrap a raw delta, clipping it into the budget.
    pub fn clipped(delta: Array4<f64>, epsilon: f64) -> Self {
        Perturbation { delta: clip_perturbation(delta, epsilon), epsilon }
    }

    /// Wrap a delta that must already satisfy the budget; errors otherwise.
    pub fn checked(delta: Array4<f64>, epsilon: f64) -> Result<Self> {
        let max = max_abs(&delta);
        if max > epsilon {
            return Err(SegueError::Runtime(format!(
                "perturbation exceeds budget: max |delta| = {max} > epsilon = {epsilon}"
            )));
        }
        Ok(Perturbation { delta, epsilon })
    }

    pub fn delta(&self) -> &Array4<f64> {
        &self.delta
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    /// Largest absolute entry; by construction at most `epsilon`.
    pub fn max_abs(&self) -> f64 {
        max_abs(&self.delta)
    }
}

fn max_abs(x: &Array4<f64>) -> f64 {
    x.iter().fold(0.0f64, |acc, v| acc.max(v.abs()))
}

/// Clamp every entry into `[-epsilon, epsilon]`.
pub fn clip_perturbation(mut delta: Array4<f64>, epsilon: f64) -> Array4<f64> {
    assert!(epsilon >= 0.0, "epsilon must be non-negative");
    delta.mapv_inplace(|v| v.clamp(-epsilon, epsilon));
    delta
}

/// What actually landed on the pixel grid after applying a perturbation.
#[derive(Debug, Clone)]
pub struct ApplyStats {
    /// Largest |delta| before clamping to [0,1] and quantizing.
    pub max_delta_pre: f64,
    /// Largest per-pixel deviation after quantization, in integer levels
    /// (exact; compares quantized perturbed against quantized clean).
    pub max_levels_post: u32,
    /// Per-image largest |delta| before quantization.
    pub per_image_max_delta: Vec<f64>,
}

/// Add a perturbation to a batch, clamp to `[0,1]`, and snap to the
/// quantization grid.
///
/// The budget must survive storage: the post-quantization deviation can
/// legitimately exceed `epsilon` by at most one quantization step (clean
/// and perturbed values round in opposite directions at worst). That bound
/// is checked exactly in the integer domain and violation is an error, not
/// a warning — it would mean the exported dataset breaks its own contract.
pub fn apply_and_quantize(
    images: &ImageBatch,
    perturbation: &Perturbation,
    policy: &QuantizationPolicy,
) -> Result<(ImageBatch, ApplyStats)> {
    let delta = perturbation.delta();
    if images.pixels.dim() != delta.dim() {
        return Err(SegueError::Config(format!(
            "image batch {:?} and perturbation {:?} shapes differ",
            images.pixels.dim(),
            delta.dim()
        )));
    }
    let n = images.len();
    let mut per_image_max_delta = vec![0.0f64; n];
    for (i, d) in delta.outer_iter().enumerate() {
        per_image_max_delta[i] = d.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    }
    let max_delta_pre = per_image_max_delta.iter().cloned().fold(0.0, f64::max);

    let perturbed = (&images.pixels + delta).mapv(|v| v.clamp(0.0, 1.0));
    let quantized = policy.quantize(&perturbed);

    // Exact integer-domain budget check against the quantized clean image.
    let mut max_levels_post = 0u32;
    for (&clean, &dirty) in images.pixels.iter().zip(quantized.iter()) {
        let lc = policy.level_of(clean);
        let ld = policy.level_of(dirty);
        max_levels_post = max_levels_post.max(lc.abs_diff(ld));
    }
    // epsilon in levels, rounded up, plus the one step both roundings can
    // jointly contribute.
    let budget_levels = (perturbation.epsilon() * (policy.levels - 1) as f64).ceil() as u32 + 1;
    if max_levels_post > budget_levels {
        return Err(SegueError::Runtime(format!(
            "post-quantization deviation {max_levels_post} levels exceeds budget {budget_levels}"
        )));
    }

    let batch = ImageBatch::new(quantized, images.labels.clone())?;
    Ok((batch, ApplyStats { max_delta_pre, max_levels_post, per_image_max_delta }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    const EPS: f64 = 8.0 / 255.0;

    #[test]
    fn clip_clamps_to_budget_exactly() {
        let mut delta = Array4::<f64>::zeros((1, 1, 2, 2));
        delta[[0, 0, 0, 0]] = 0.5;
        delta[[0, 0, 0, 1]] = -0.5;
        delta[[0, 0, 1, 0]] = EPS / 2.0;
        let clipped = clip_perturbation(delta, EPS);
        assert_eq!(clipped[[0, 0, 0, 0]], EPS);
        assert_eq!(clipped[[0, 0, 0, 1]], -EPS);
        assert_eq!(clipped[[0, 0, 1, 0]], EPS / 2.0);
    }

    #[test]
    fn checked_rejects_over_budget() {
        let mut delta = Array4::<f64>::zeros((1, 1, 1, 1));
        delta[[0, 0, 0, 0]] = EPS * 1.01;
        assert!(Perturbation::checked(delta.clone(), EPS).is_err());
        assert!(Perturbation::clipped(delta, EPS).max_abs() <= EPS);
    }

    /// Worst case for storage: clean pixel just below a rounding boundary,
    /// delta pushes it up; quantized deviation may reach ceil(eps*255)+1 = 9
    /// levels but never more.
    #[test]
    fn apply_and_quantize_respects_budget_in_levels() {
        let policy = QuantizationPolicy::default();
        let n = 64;
        let mut pixels = Array4::<f64>::zeros((1, 1, 8, 8));
        let mut delta = Array4::<f64>::zeros((1, 1, 8, 8));
        // A sweep of awkward values and alternating extreme deltas.
        for (i, v) in pixels.iter_mut().enumerate() {
            *v = (i as f64 + 0.499) / n as f64;
        }
        for (i, d) in delta.iter_mut().enumerate() {
            *d = if i % 2 == 0 { EPS } else { -EPS };
        }
        let batch = ImageBatch::new(pixels, vec![0]).unwrap();
        let pert = Perturbation::checked(delta, EPS).unwrap();
        let (out, stats) = apply_and_quantize(&batch, &pert, &policy).unwrap();
        assert!(stats.max_levels_post <= 9, "got {} levels", stats.max_levels_post);
        assert!((stats.max_delta_pre - EPS).abs() < 1e-15);
        assert_eq!(stats.per_image_max_delta.len(), 1);
        // Output is on the grid: quantization is a fixed point.
        let requant = policy.quantize(&out.pixels);
        assert_eq!(requant, out.pixels);
    }

    #[test]
    fn apply_clamps_at_image_range_boundaries() {
        let policy = QuantizationPolicy::default();
        let mut pixels = Array4::<f64>::zeros((1, 1, 1, 2));
        pixels[[0, 0, 0, 1]] = 1.0;
        let mut delta = Array4::<f64>::zeros((1, 1, 1, 2));
        delta[[0, 0, 0, 0]] = -EPS; // would go below 0
        delta[[0, 0, 0, 1]] = EPS; // would go above 1
        let batch = ImageBatch::new(pixels, vec![0]).unwrap();
        let pert = Perturbation::checked(delta, EPS).unwrap();
        let (out, stats) = apply_and_quantize(&batch, &pert, &policy).unwrap();
        assert_eq!(out.pixels[[0, 0, 0, 0]], 0.0);
        assert_eq!(out.pixels[[0, 0, 0, 1]], 1.0);
        assert_eq!(stats.max_levels_post, 0, "clamping absorbed the whole delta");
    }

    #[test]
    fn shape_mismatch_is_config_error() {
        let policy = QuantizationPolicy::default();
        let batch = ImageBatch::new(Array4::zeros((1, 1, 2, 2)), vec![0]).unwrap();
        let pert = Perturbation::checked(Array4::zeros((1, 1, 3, 3)), EPS).unwrap();
        let err = apply_and_quantize(&batch, &pert, &policy).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }
}
