//! The distortion layer: train-time robustness transforms.
//!
//! During generator training each perturbed batch passes through a chain of
//! differentiable distortions — a small adversarial step against the
//! surrogate, Gaussian blur, random flips, and a sharpness adjustment — so
//! the learned perturbations survive the corruptions an attacker might
//! apply. The chain runs in a fixed order:
//!
//! `adversarial -> blur -> hflip -> vflip -> sharpness`
//!
//! Every op records what its backward needs in a [`DistortionTrace`]; the
//! adversarial offset is treated as a constant (its dependence on the input
//! through the surrogate's gradient is deliberately not differentiated).
//! Flip draws are per batch, so one forward/backward pair sees a single
//! geometry.

use ndarray::{Array1, Array4};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{softmax_ce, ImageClassifier, Mode};
use crate::{Result, SegueError};

/// Which ops run. All on by default.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct EnabledOps {
    pub adversarial: bool,
    pub blur: bool,
    pub hflip: bool,
    pub vflip: bool,
    pub sharpness: bool,
}

impl Default for EnabledOps {
    fn default() -> Self {
        EnabledOps { adversarial: true, blur: true, hflip: true, vflip: true, sharpness: true }
    }
}

/// Distortion-layer hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DistortionConfig {
    /// Adversarial step budget (L-infinity).
    pub rho_d: f64,
    /// Number of sign-gradient steps inside the budget.
    pub adv_steps: usize,
    /// Gaussian blur kernel (height, width); odd sizes.
    pub blur_kernel: (usize, usize),
    pub blur_sigma: f64,
    pub p_hflip: f64,
    pub p_vflip: f64,
    /// Sharpness factor: 1 = identity, 2 = one full unsharp-mask step.
    pub sharpness_factor: f64,
    pub enabled: EnabledOps,
}

impl Default for DistortionConfig {
    fn default() -> Self {
        DistortionConfig {
            rho_d: 1.0 / 255.0,
            adv_steps: 1,
            blur_kernel: (3, 3),
            blur_sigma: 0.2,
            p_hflip: 0.1,
            p_vflip: 0.1,
            sharpness_factor: 2.0,
            enabled: EnabledOps::default(),
        }
    }
}

impl DistortionConfig {
    /// Identity chain: nothing enabled.
    pub fn none() -> Self {
        DistortionConfig {
            enabled: EnabledOps {
                adversarial: false,
                blur: false,
                hflip: false,
                vflip: false,
                sharpness: false,
            },
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rho_d < 0.0 {
            return Err(SegueError::Config("rho_d must be non-negative".into()));
        }
        if self.enabled.adversarial && self.rho_d > 0.0 && self.adv_steps == 0 {
            return Err(SegueError::Config("adversarial distortion needs adv_steps >= 1".into()));
        }
        let (kh, kw) = self.blur_kernel;
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(SegueError::Config("blur kernel sides must be odd".into()));
        }
        if self.blur_sigma <= 0.0 {
            return Err(SegueError::Config("blur sigma must be positive".into()));
        }
        for (name, p) in [("p_hflip", self.p_hflip), ("p_vflip", self.p_vflip)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(SegueError::Config(format!("{name} must be in [0,1]")));
            }
        }
        Ok(())
    }
}

/// Sign with the zero-at-zero convention of tensor libraries (unlike
/// `f64::signum`, which maps +0.0 to 1.0).
pub fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Normalized 1-D Gaussian taps for one axis.
pub fn gaussian_kernel_1d(len: usize, sigma: f64) -> Array1<f64> {
    assert!(len % 2 == 1, "kernel length must be odd");
    let r = (len / 2) as isize;
    let mut k = Array1::<f64>::zeros(len);
    for (i, v) in k.iter_mut().enumerate() {
        let d = (i as isize - r) as f64;
        *v = (-d * d / (2.0 * sigma * sigma)).exp();
    }
    let sum = k.sum();
    k.mapv_inplace(|v| v / sum);
    k
}

/// One separable 1-D convolution pass with replicate padding, along height
/// (`axis=2`) or width (`axis=3`).
fn conv1d_replicate(x: &Array4<f64>, taps: &Array1<f64>, along_h: bool) -> Array4<f64> {
    let (n, c, h, w) = x.dim();
    let r = (taps.len() / 2) as isize;
    let mut y = Array4::<f64>::zeros((n, c, h, w));
    for i in 0..n {
        for ch in 0..c {
            for yy in 0..h {
                for xx in 0..w {
                    let mut acc = 0.0;
                    for (t, &kv) in taps.iter().enumerate() {
                        let off = t as isize - r;
                        let (sy, sx) = if along_h {
                            (((yy as isize + off).clamp(0, h as isize - 1)) as usize, xx)
                        } else {
                            (yy, ((xx as isize + off).clamp(0, w as isize - 1)) as usize)
                        };
                        acc += kv * x[[i, ch, sy, sx]];
                    }
                    y[[i, ch, yy, xx]] = acc;
                }
            }
        }
    }
    y
}

/// Exact adjoint of [`conv1d_replicate`]: scatter instead of gather, so the
/// replicate-padding mass lands back on the border pixels it came from.
fn conv1d_replicate_adjoint(gy: &Array4<f64>, taps: &Array1<f64>, along_h: bool) -> Array4<f64> {
    let (n, c, h, w) = gy.dim();
    let r = (taps.len() / 2) as isize;
    let mut gx = Array4::<f64>::zeros((n, c, h, w));
    for i in 0..n {
        for ch in 0..c {
            for yy in 0..h {
                for xx in 0..w {
                    let g = gy[[i, ch, yy, xx]];
                    for (t, &kv) in taps.iter().enumerate() {
                        let off = t as isize - r;
                        let (sy, sx) = if along_h {
                            (((yy as isize + off).clamp(0, h as isize - 1)) as usize, xx)
                        } else {
                            (yy, ((xx as isize + off).clamp(0, w as isize - 1)) as usize)
                        };
                        gx[[i, ch, sy, sx]] += kv * g;
                    }
                }
            }
        }
    }
    gx
}

/// Separable Gaussian blur with replicate padding.
pub fn gaussian_blur(x: &Array4<f64>, kernel: (usize, usize), sigma: f64) -> Array4<f64> {
    let kh = gaussian_kernel_1d(kernel.0, sigma);
    let kw = gaussian_kernel_1d(kernel.1, sigma);
    conv1d_replicate(&conv1d_replicate(x, &kh, true), &kw, false)
}

fn gaussian_blur_adjoint(gy: &Array4<f64>, kernel: (usize, usize), sigma: f64) -> Array4<f64> {
    let kh = gaussian_kernel_1d(kernel.0, sigma);
    let kw = gaussian_kernel_1d(kernel.1, sigma);
    conv1d_replicate_adjoint(&conv1d_replicate_adjoint(gy, &kw, false), &kh, true)
}

/// Flip along width.
pub fn hflip(x: &Array4<f64>) -> Array4<f64> {
    x.slice(ndarray::s![.., .., .., ..;-1]).to_owned()
}

/// Flip along height.
pub fn vflip(x: &Array4<f64>) -> Array4<f64> {
    x.slice(ndarray::s![.., .., ..;-1, ..]).to_owned()
}

/// The 3x3 smoothing kernel behind the sharpness op (the classic image
/// library smooth filter), applied with replicate padding.
fn smooth3(x: &Array4<f64>) -> Array4<f64> {
    smooth3_core(x, false)
}

fn smooth3_adjoint(gy: &Array4<f64>) -> Array4<f64> {
    smooth3_core(gy, true)
}

fn smooth3_core(x: &Array4<f64>, adjoint: bool) -> Array4<f64> {
    const K: [[f64; 3]; 3] = [[1.0, 1.0, 1.0], [1.0, 5.0, 1.0], [1.0, 1.0, 1.0]];
    const NORM: f64 = 13.0;
    let (n, c, h, w) = x.dim();
    let mut y = Array4::<f64>::zeros((n, c, h, w));
    for i in 0..n {
        for ch in 0..c {
            for yy in 0..h {
                for xx in 0..w {
                    if adjoint {
                        let g = x[[i, ch, yy, xx]] / NORM;
                        for (dy, row) in K.iter().enumerate() {
                            for (dx, &kv) in row.iter().enumerate() {
                                let sy = (yy as isize + dy as isize - 1).clamp(0, h as isize - 1);
                                let sx = (xx as isize + dx as isize - 1).clamp(0, w as isize - 1);
                                y[[i, ch, sy as usize, sx as usize]] += kv * g;
                            }
                        }
                    } else {
                        let mut acc = 0.0;
                        for (dy, row) in K.iter().enumerate() {
                            for (dx, &kv) in row.iter().enumerate() {
                                let sy = (yy as isize + dy as isize - 1).clamp(0, h as isize - 1);
                                let sx = (xx as isize + dx as isize - 1).clamp(0, w as isize - 1);
                                acc += kv * x[[i, ch, sy as usize, sx as usize]];
                            }
                        }
                        y[[i, ch, yy, xx]] = acc / NORM;
                    }
                }
            }
        }
    }
    y
}

/// Sharpness adjustment in unsharp-mask form with a final clamp to [0,1]:
/// `clamp(x + (factor - 1) * (x - smooth(x)))`. Factor 1 is the identity;
/// factor 2 doubles the high-frequency detail.
pub fn adjust_sharpness(x: &Array4<f64>, factor: f64) -> Array4<f64> {
    sharpness_forward(x, factor).0
}

fn sharpness_forward(x: &Array4<f64>, factor: f64) -> (Array4<f64>, Array4<f64>) {
    let blurred = smooth3(x);
    let pre = x + &((x - &blurred) * (factor - 1.0));
    let clamped = pre.mapv(|v| v.clamp(0.0, 1.0));
    (clamped, pre)
}

/// Gradient of the sharpness op: zero where the clamp saturated, otherwise
/// the adjoint of the linear unsharp mask.
fn sharpness_backward(gy: &Array4<f64>, pre: &Array4<f64>, factor: f64) -> Array4<f64> {
    let mut g = gy.clone();
    g.zip_mut_with(pre, |gv, &p| {
        if !(0.0..=1.0).contains(&p) {
            *gv = 0.0;
        }
    });
    // A = I + (f-1)(I - S); A^T g = g + (f-1)(g - S^T g).
    let st = smooth3_adjoint(&g);
    &g + &((&g - &st) * (factor - 1.0))
}

/// One or more sign-gradient ascent steps on the model's cross-entropy,
/// bounded in L-infinity by `rho`: step size `rho / steps`, projected back
/// into the `rho`-ball around the input and clamped to [0,1] after every
/// step. `rho = 0` is the identity.
///
/// The model is used in evaluation mode and its parameter gradients are
/// left untouched, so this works against a frozen model.
pub fn adversarial_step(
    model: &mut dyn ImageClassifier,
    x: &Array4<f64>,
    labels: &[u32],
    rho: f64,
    steps: usize,
) -> Array4<f64> {
    if rho == 0.0 || steps == 0 {
        return x.clone();
    }
    let alpha = rho / steps as f64;
    let mut adv = x.clone();
    for _ in 0..steps {
        let logits = model.forward(&adv, Mode::Eval);
        let (_, dl) = softmax_ce(&logits.view(), labels);
        let gx = model
            .backward(&dl, true, false)
            .expect("input gradient requested from adversarial step");
        ndarray::Zip::from(&mut adv).and(&gx).for_each(|a, &g| {
            *a += alpha * sign(g);
        });
        // Project back into the rho-ball around x (relevant for steps > 1
        // where signs can disagree across iterations), then into range.
        ndarray::Zip::from(&mut adv).and(x).for_each(|a, &xv| {
            *a = (*a).clamp(xv - rho, xv + rho).clamp(0.0, 1.0);
        });
    }
    adv
}

/// What happened in one distortion pass, for the backward sweep.
pub struct DistortionTrace {
    steps: Vec<TraceStep>,
}

enum TraceStep {
    /// Adversarial offset added; treated as constant, gradient passes
    /// through unchanged.
    AddOffset,
    Blur { kernel: (usize, usize), sigma: f64 },
    HFlip,
    VFlip,
    Sharpness { factor: f64, pre: Array4<f64> },
}

impl DistortionTrace {
    /// Pull a gradient at the distorted output back to the input.
    pub fn backward(&self, gy: &Array4<f64>) -> Array4<f64> {
        let mut g = gy.clone();
        for step in self.steps.iter().rev() {
            g = match step {
                TraceStep::AddOffset => g,
                TraceStep::Blur { kernel, sigma } => gaussian_blur_adjoint(&g, *kernel, *sigma),
                TraceStep::HFlip => hflip(&g),
                TraceStep::VFlip => vflip(&g),
                TraceStep::Sharpness { factor, pre } => sharpness_backward(&g, pre, *factor),
            };
        }
        g
    }
}

/// Run the full distortion chain. `model` is required when the adversarial
/// op is enabled with a positive budget. Flip decisions are drawn from
/// `rng` once per batch per op. Returns the distorted batch and, when
/// `want_trace` is set, the trace for backpropagation.
pub fn apply_distortion(
    x: &Array4<f64>,
    labels: &[u32],
    model: Option<&mut dyn ImageClassifier>,
    config: &DistortionConfig,
    rng: &mut ChaCha8Rng,
    want_trace: bool,
) -> Result<(Array4<f64>, Option<DistortionTrace>)> {
    config.validate()?;
    let mut steps = Vec::new();
    let mut out = x.clone();

    if config.enabled.adversarial && config.rho_d > 0.0 {
        let model = model.ok_or_else(|| {
            SegueError::Config("adversarial distortion enabled but no model provided".into())
        })?;
        out = adversarial_step(model, &out, labels, config.rho_d, config.adv_steps);
        steps.push(TraceStep::AddOffset);
    }
    if config.enabled.blur {
        out = gaussian_blur(&out, config.blur_kernel, config.blur_sigma);
        steps.push(TraceStep::Blur { kernel: config.blur_kernel, sigma: config.blur_sigma });
    }
    if config.enabled.hflip && rng.random::<f64>() < config.p_hflip {
        out = hflip(&out);
        steps.push(TraceStep::HFlip);
    }
    if config.enabled.vflip && rng.random::<f64>() < config.p_vflip {
        out = vflip(&out);
        steps.push(TraceStep::VFlip);
    }
    if config.enabled.sharpness {
        let (y, pre) = sharpness_forward(&out, config.sharpness_factor);
        out = y;
        steps.push(TraceStep::Sharpness { factor: config.sharpness_factor, pre });
    }
    Ok((out, want_trace.then_some(DistortionTrace { steps })))
}
