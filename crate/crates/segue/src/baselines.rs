//! Reference perturbation methods the generator is benchmarked against:
//! error-minimizing noise (sample-wise, bi-level), its robust variant with
//! an adversarial max step, linearly separable patches, and class-wise
//! random noise. All of them feed the same application/export path as the
//! generator so comparisons stay fair.
//!
//! The robust and patch baselines are deliberately reduced to their cores
//! (single max step; uniform patch colors) and say so in their metadata —
//! their numbers characterize this implementation, not the original
//! recipes.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array4, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::core::{
    apply_and_quantize, export_unlearnable, ApplyStats, Dataset, ImageBatch, Perturbation,
    QuantizationPolicy, UnlearnableProvenance,
};
use crate::distortion::{adversarial_step, sign};
use crate::generator::ProtectReport;
use crate::nn::{softmax_ce, Adam, ImageClassifier, Mode};
use crate::util::io;
use crate::util::rng::rng_for;
use crate::{Result, SegueError};

/// Whether a perturbation set carries one delta per example or per class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbationMode {
    SampleWise,
    ClassWise,
}

/// A finished set of perturbations: `[N, C, H, W]` for sample-wise
/// methods, `[K, C, H, W]` for class-wise methods (indexed by label at
/// application time).
#[derive(Debug, Clone)]
pub struct PerturbationSet {
    pub mode: PerturbationMode,
    pub deltas: Array4<f64>,
    pub epsilon: f64,
    /// Generating method, e.g. "ue" or "classwise_random".
    pub method: String,
    /// True when the method is a reduced-fidelity stand-in for an external
    /// recipe; such sets must not be quoted as faithful reproductions.
    pub simplified: bool,
    pub params: BTreeMap<String, String>,
}

impl PerturbationSet {
    /// Check the elementwise budget.
    pub fn validate(&self) -> Result<()> {
        let max = self.deltas.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if max > self.epsilon {
            return Err(SegueError::Runtime(format!(
                "perturbation set '{}' violates its budget: max |delta| = {max} > {}",
                self.method, self.epsilon
            )));
        }
        Ok(())
    }

    pub fn max_abs(&self) -> f64 {
        self.deltas.iter().fold(0.0f64, |a, v| a.max(v.abs()))
    }
}

const PSET_MAGIC: &[u8; 4] = b"SGPB";
const PSET_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct PsetHeader {
    mode: PerturbationMode,
    shape: [usize; 4],
    epsilon: f64,
    method: String,
    simplified: bool,
    params: BTreeMap<String, String>,
}

/// Serialize a perturbation set to its versioned container:
/// magic, version, header length, JSON header, row-major f64 payload.
pub fn save_perturbation_set(pset: &PerturbationSet, path: &Path) -> Result<()> {
    pset.validate()?;
    let (a, b, c, d) = pset.deltas.dim();
    let header = serde_json::to_vec(&PsetHeader {
        mode: pset.mode,
        shape: [a, b, c, d],
        epsilon: pset.epsilon,
        method: pset.method.clone(),
        simplified: pset.simplified,
        params: pset.params.clone(),
    })
    .map_err(|e| SegueError::Runtime(format!("perturbation-set header serialization: {e}")))?;
    let mut bytes = Vec::with_capacity(16 + header.len() + pset.deltas.len() * 8);
    bytes.extend_from_slice(PSET_MAGIC);
    bytes.extend_from_slice(&PSET_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header);
    for v in pset.deltas.iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    io::write_atomic(path, &bytes)
}

pub fn load_perturbation_set(path: &Path) -> Result<PerturbationSet> {
    let bytes = io::read_bytes(path)?;
    let fail = |msg: &str| SegueError::format(path, msg);
    if bytes.len() < 16 || &bytes[0..4] != PSET_MAGIC {
        return Err(fail("not a perturbation-set container"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != PSET_VERSION {
        return Err(fail(&format!("unsupported container version {version}")));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = 16 + header_len;
    if bytes.len() < body {
        return Err(fail("truncated header"));
    }
    let header: PsetHeader = serde_json::from_slice(&bytes[16..body])
        .map_err(|e| fail(&format!("bad header: {e}")))?;
    let count: usize = header.shape.iter().product();
    if bytes.len() != body + count * 8 {
        return Err(fail("payload size does not match header shape"));
    }
    let values: Vec<f64> = bytes[body..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let [a, b, c, d] = header.shape;
    let pset = PerturbationSet {
        mode: header.mode,
        deltas: Array4::from_shape_vec((a, b, c, d), values)
            .map_err(|e| fail(&format!("bad shape: {e}")))?,
        epsilon: header.epsilon,
        method: header.method,
        simplified: header.simplified,
        params: header.params,
    };
    pset.validate()?;
    Ok(pset)
}

/// Knobs of the error-minimizing bi-level optimization (and its robust
/// variant). Defaults follow the reference schedule: 100 model updates per
/// round, 20 sign steps of ε/10 per example per round.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct MinMinConfig {
    pub epsilon: f64,
    /// Surrogate updates per round.
    pub outer_steps: usize,
    /// Projected sign-gradient steps per example per round.
    pub inner_steps: usize,
    /// Inner step size as a fraction of epsilon.
    pub step_frac: f64,
    /// Round cap.
    pub max_rounds: usize,
    /// Stop once the full-set cross-entropy drops below this.
    pub stop_ce: f64,
    pub batch_size: usize,
    /// Surrogate learning rate (Adam).
    pub lr: f64,
    /// Adversarial max-step radius; zero disables the max step and the
    /// optimization reduces to plain error minimization.
    pub rho_a: f64,
    pub adv_steps: usize,
    pub seed: u64,
}

impl Default for MinMinConfig {
    fn default() -> Self {
        MinMinConfig {
            epsilon: 8.0 / 255.0,
            outer_steps: 100,
            inner_steps: 20,
            step_frac: 0.1,
            max_rounds: 10,
            stop_ce: 0.01,
            batch_size: 64,
            lr: 0.001,
            rho_a: 0.0,
            adv_steps: 1,
            seed: 0,
        }
    }
}

impl MinMinConfig {
    fn validate(&self) -> Result<()> {
        if self.epsilon <= 0.0 {
            return Err(SegueError::Config("epsilon must be positive".into()));
        }
        if self.outer_steps == 0 || self.inner_steps == 0 {
            return Err(SegueError::Config("step counts must be positive".into()));
        }
        if self.step_frac <= 0.0 {
            return Err(SegueError::Config("step_frac must be positive".into()));
        }
        if self.max_rounds == 0 {
            return Err(SegueError::Config("max_rounds must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(SegueError::Config("batch_size must be positive".into()));
        }
        if self.rho_a < 0.0 {
            return Err(SegueError::Config("rho_a must be non-negative".into()));
        }
        Ok(())
    }
}

/// Progress record of a min-min run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MinMinReport {
    pub rounds_run: usize,
    /// Full-set surrogate cross-entropy after each round.
    pub round_losses: Vec<f64>,
    pub stopped_early: bool,
    pub wall_seconds: f64,
}

/// Error-minimizing noise: alternate training the surrogate on perturbed
/// data with per-example projected sign-gradient descent on the
/// perturbations, both minimizing the same cross-entropy.
pub fn ue_min_min(
    dataset: &Dataset,
    f: &mut dyn ImageClassifier,
    cfg: &MinMinConfig,
) -> Result<(PerturbationSet, MinMinReport)> {
    let cfg = MinMinConfig { rho_a: 0.0, ..cfg.clone() };
    min_min_core(dataset, f, &cfg, "ue", false)
}

/// Robust error-minimizing noise: every inner minimization phase first
/// takes an adversarial max step of radius `rho_a` on the perturbed input,
/// then minimizes against that hardened point. This is the single-max-step
/// reduction of the full min-min-max recipe, marked `simplified`.
pub fn rue_min_min_max(
    dataset: &Dataset,
    f: &mut dyn ImageClassifier,
    cfg: &MinMinConfig,
) -> Result<(PerturbationSet, MinMinReport)> {
    min_min_core(dataset, f, cfg, "rue", true)
}

fn min_min_core(
    dataset: &Dataset,
    f: &mut dyn ImageClassifier,
    cfg: &MinMinConfig,
    method: &str,
    simplified: bool,
) -> Result<(PerturbationSet, MinMinReport)> {
    cfg.validate()?;
    let train = &dataset.train;
    let n = train.len();
    if n == 0 {
        return Err(SegueError::Config("cannot optimize over an empty train split".into()));
    }
    let started = std::time::Instant::now();
    let step = cfg.epsilon * cfg.step_frac;
    let mut delta = Array4::<f64>::zeros(train.pixels.raw_dim());
    let mut adam = Adam::new(cfg.lr);
    let mut rng = rng_for(cfg.seed, "min-min");

    let batches: Vec<Vec<usize>> = (0..n)
        .collect::<Vec<usize>>()
        .chunks(cfg.batch_size)
        .map(|c| c.to_vec())
        .collect();

    let full_set_ce = |f: &dyn ImageClassifier, delta: &Array4<f64>| -> Result<f64> {
        let mut total = 0.0;
        for idx in &batches {
            let xb = gather(&train.pixels, idx) + &gather(delta, idx);
            let yb: Vec<u32> = idx.iter().map(|&i| train.labels[i]).collect();
            let logits = f.forward_inference(&xb);
            let (ce, _) = softmax_ce(&logits.view(), &yb);
            if !ce.is_finite() {
                return Err(SegueError::Runtime("non-finite loss in min-min stop metric".into()));
            }
            total += ce * idx.len() as f64;
        }
        Ok(total / n as f64)
    };

    let mut round_losses = Vec::new();
    let mut stopped_early = false;
    for _round in 0..cfg.max_rounds {
        // Outer: train the surrogate on the currently perturbed data.
        let mut order: Vec<usize> = (0..n).collect();
        let mut done = 0;
        'outer: loop {
            order.shuffle(&mut rng);
            for chunk in order.chunks(cfg.batch_size) {
                let xb = gather(&train.pixels, chunk) + &gather(&delta, chunk);
                let yb: Vec<u32> = chunk.iter().map(|&i| train.labels[i]).collect();
                let logits = f.forward(&xb, Mode::Train);
                let (ce, dl) = softmax_ce(&logits.view(), &yb);
                if !ce.is_finite() {
                    return Err(SegueError::Runtime(format!(
                        "non-finite loss in min-min outer step {done}"
                    )));
                }
                f.zero_grad();
                f.backward(&dl, false, true);
                adam.step(&mut f.params_mut());
                done += 1;
                if done >= cfg.outer_steps {
                    break 'outer;
                }
            }
        }

        // Inner: per-example projected sign-gradient descent. Examples are
        // independent: gradients never couple across the batch dimension.
        for idx in &batches {
            let xb = gather(&train.pixels, idx);
            let yb: Vec<u32> = idx.iter().map(|&i| train.labels[i]).collect();
            let mut db = gather(&delta, idx);

            // Optional max step: harden the anchor point adversarially and
            // keep the offset fixed through the minimization.
            let eta = if cfg.rho_a > 0.0 {
                let base = &xb + &db;
                let adv = adversarial_step(f, &base, &yb, cfg.rho_a, cfg.adv_steps);
                adv - base
            } else {
                Array4::zeros(xb.raw_dim())
            };

            for step_i in 0..cfg.inner_steps {
                let logits = f.forward(&(&xb + &db + &eta), Mode::Eval);
                let (ce, dl) = softmax_ce(&logits.view(), &yb);
                if !ce.is_finite() {
                    return Err(SegueError::Runtime(format!(
                        "non-finite loss in min-min inner step {step_i}"
                    )));
                }
                let gx = f
                    .backward(&dl, true, false)
                    .expect("input gradient requested");
                // Descend, then project onto the intersection of the
                // epsilon-ball and the image box (both are boxes).
                ndarray::Zip::from(&mut db).and(&gx).and(&xb).for_each(|d, &g, &x| {
                    let moved = *d - step * sign(g);
                    *d = moved
                        .clamp(-cfg.epsilon, cfg.epsilon)
                        .clamp(-x, 1.0 - x);
                });
            }
            scatter(&mut delta, idx, &db);
        }

        let ce = full_set_ce(f, &delta)?;
        round_losses.push(ce);
        if ce < cfg.stop_ce {
            stopped_early = true;
            break;
        }
    }

    let mut params = BTreeMap::new();
    params.insert("outer_steps".into(), cfg.outer_steps.to_string());
    params.insert("inner_steps".into(), cfg.inner_steps.to_string());
    params.insert("step_frac".into(), cfg.step_frac.to_string());
    params.insert("rho_a".into(), cfg.rho_a.to_string());
    params.insert("seed".into(), cfg.seed.to_string());
    let pset = PerturbationSet {
        mode: PerturbationMode::SampleWise,
        deltas: delta,
        epsilon: cfg.epsilon,
        method: method.into(),
        simplified,
        params,
    };
    pset.validate()?;
    let report = MinMinReport {
        rounds_run: round_losses.len(),
        round_losses,
        stopped_early,
        wall_seconds: started.elapsed().as_secs_f64(),
    };
    Ok((pset, report))
}

fn gather(src: &Array4<f64>, idx: &[usize]) -> Array4<f64> {
    src.select(Axis(0), idx)
}

fn scatter(dst: &mut Array4<f64>, idx: &[usize], rows: &Array4<f64>) {
    for (k, &i) in idx.iter().enumerate() {
        dst.index_axis_mut(Axis(0), i).assign(&rows.index_axis(Axis(0), k));
    }
}

/// Linearly separable patches: per class, a coarse grid of constant
/// per-channel colors drawn from seeded uniform noise, replicated up to
/// full resolution, centered, and scaled so the largest magnitude is
/// exactly epsilon.
pub fn lsp_patches(
    num_classes: usize,
    image_size: (usize, usize, usize),
    patch_size: usize,
    epsilon: f64,
    seed: u64,
) -> Result<PerturbationSet> {
    let (c, h, w) = image_size;
    if patch_size == 0 || h % patch_size != 0 || w % patch_size != 0 {
        return Err(SegueError::Config(format!(
            "patch size {patch_size} must divide the image sides {h}x{w}"
        )));
    }
    if num_classes == 0 {
        return Err(SegueError::Config("need at least one class".into()));
    }
    let (gh, gw) = (h / patch_size, w / patch_size);
    let mut rng = rng_for(seed, "lsp-patches");
    let mut deltas = Array4::<f64>::zeros((num_classes, c, h, w));
    for k in 0..num_classes {
        let grid: Vec<f64> =
            (0..c * gh * gw).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mean = grid.iter().sum::<f64>() / grid.len() as f64;
        let centered: Vec<f64> = grid.iter().map(|v| v - mean).collect();
        let max = centered.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if max < 1e-12 {
            return Err(SegueError::Runtime(
                "degenerate patch draw: all values equal after centering".into(),
            ));
        }
        let scale = epsilon / max;
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let g = centered[(ci * gh + y / patch_size) * gw + x / patch_size];
                    deltas[[k, ci, y, x]] = g * scale;
                }
            }
        }
    }
    let mut params = BTreeMap::new();
    params.insert("patch_size".into(), patch_size.to_string());
    params.insert("seed".into(), seed.to_string());
    let pset = PerturbationSet {
        mode: PerturbationMode::ClassWise,
        deltas,
        epsilon,
        method: "lsp".into(),
        simplified: true,
        params,
    };
    pset.validate()?;
    Ok(pset)
}

/// Class-wise random noise: per class one i.i.d. uniform [-ε, ε] tensor.
pub fn classwise_random(
    num_classes: usize,
    image_size: (usize, usize, usize),
    epsilon: f64,
    seed: u64,
) -> Result<PerturbationSet> {
    if num_classes == 0 {
        return Err(SegueError::Config("need at least one class".into()));
    }
    let (c, h, w) = image_size;
    let mut rng = rng_for(seed, "classwise-random");
    let deltas = Array4::from_shape_fn((num_classes, c, h, w), |_| {
        rng.random_range(-epsilon..=epsilon)
    });
    let mut params = BTreeMap::new();
    params.insert("seed".into(), seed.to_string());
    Ok(PerturbationSet {
        mode: PerturbationMode::ClassWise,
        deltas,
        epsilon,
        method: "classwise_random".into(),
        simplified: false,
        params,
    })
}

/// Apply a perturbation set to a dataset's train split and export the
/// result through the shared clamp/quantize/manifest path.
pub fn apply_perturbation_set(
    dataset: &Dataset,
    pset: &PerturbationSet,
    out_dir: &Path,
) -> Result<ProtectReport> {
    pset.validate()?;
    let train = &dataset.train;
    let n = train.len();
    match pset.mode {
        PerturbationMode::SampleWise => {
            if pset.deltas.dim().0 != n {
                return Err(SegueError::Config(format!(
                    "sample-wise set holds {} deltas for {} train images",
                    pset.deltas.dim().0,
                    n
                )));
            }
        }
        PerturbationMode::ClassWise => {
            let k = pset.deltas.dim().0;
            if let Some(&bad) = train.labels.iter().find(|&&y| (y as usize) >= k) {
                return Err(SegueError::Config(format!(
                    "label {bad} out of range for a {k}-class perturbation set"
                )));
            }
        }
    }

    let policy = QuantizationPolicy::default();
    let mut perturbed = train.pixels.clone();
    let mut stats = ApplyStats {
        max_delta_pre: 0.0,
        max_levels_post: 0,
        per_image_max_delta: Vec::with_capacity(n),
    };
    const BATCH: usize = 128;
    let mut start = 0;
    while start < n {
        let end = (start + BATCH).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let batch = train.select(&idx);
        let delta = match pset.mode {
            PerturbationMode::SampleWise => gather(&pset.deltas, &idx),
            PerturbationMode::ClassWise => {
                let rows: Vec<usize> =
                    idx.iter().map(|&i| train.labels[i] as usize).collect();
                gather(&pset.deltas, &rows)
            }
        };
        let (stored, s) =
            apply_and_quantize(&batch, &Perturbation::clipped(delta, pset.epsilon), &policy)?;
        perturbed
            .slice_mut(ndarray::s![start..end, .., .., ..])
            .assign(&stored.pixels);
        stats.max_delta_pre = stats.max_delta_pre.max(s.max_delta_pre);
        stats.max_levels_post = stats.max_levels_post.max(s.max_levels_post);
        stats.per_image_max_delta.extend(s.per_image_max_delta);
        start = end;
    }

    let train_out = ImageBatch::new(perturbed, train.labels.clone())?;
    let provenance = UnlearnableProvenance {
        source_manifest: dataset.name.clone(),
        generator_checkpoint: format!("baseline:{}", pset.method),
        epsilon: pset.epsilon,
        max_observed_delta: stats.max_delta_pre,
    };
    let manifest_path =
        export_unlearnable(dataset, &train_out, &stats.per_image_max_delta, provenance, out_dir)?;
    Ok(ProtectReport { manifest_path, stats, images: n })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::core::{synthesize_fixture, FixtureParams};
    use crate::nn::build_classifier;
    use crate::nn::testmodel::LinearTestModel;
    use ndarray::Array2;

    fn small_dataset(classes: usize, per_class: usize, seed: u64) -> Dataset {
        let params = FixtureParams {
            classes,
            train_per_class: per_class,
            test_per_class: 1,
            size: 8,
            ..Default::default()
        };
        let (train, test) = synthesize_fixture(&params, seed).unwrap();
        Dataset {
            name: "baseline-unit".into(),
            num_classes: classes,
            image_size: (3, 8, 8),
            train,
            test,
            provenance: None,
            root: std::path::PathBuf::from("."),
        }
    }

    fn quick_cfg() -> MinMinConfig {
        MinMinConfig {
            outer_steps: 6,
            inner_steps: 4,
            max_rounds: 2,
            batch_size: 4,
            seed: 3,
            ..Default::default()
        }
    }

    #[test]
    fn ue_respects_budget_and_reports_rounds() {
        let ds = small_dataset(2, 4, 1);
        let mut f = build_classifier("cnn6", 2, 2, 2).unwrap();
        let (pset, report) = ue_min_min(&ds, f.as_mut(), &quick_cfg()).unwrap();
        assert_eq!(pset.mode, PerturbationMode::SampleWise);
        assert_eq!(pset.deltas.dim().0, 8, "one delta per train image");
        assert!(pset.max_abs() <= pset.epsilon, "budget must hold elementwise");
        assert!(!pset.simplified, "plain error minimization is full-fidelity");
        assert_eq!(report.rounds_run, report.round_losses.len());
    }

    #[test]
    fn zero_gradient_keeps_deltas_at_zero_initialization() {
        // A model whose logits ignore the input has identically zero input
        // gradient, so the inner descent never moves the deltas.
        struct Constant;
        impl ImageClassifier for Constant {
            fn forward(&mut self, x: &Array4<f64>, _m: Mode) -> Array2<f64> {
                Array2::zeros((x.dim().0, 2))
            }
            fn forward_inference(&self, x: &Array4<f64>) -> Array2<f64> {
                Array2::zeros((x.dim().0, 2))
            }
            fn backward(&mut self, d: &Array2<f64>, want_gx: bool, _w: bool) -> Option<Array4<f64>> {
                want_gx.then(|| Array4::zeros((d.nrows(), 3, 8, 8)))
            }
            fn params_mut(&mut self) -> Vec<&mut crate::nn::Param> {
                Vec::new()
            }
            fn num_classes(&self) -> usize {
                2
            }
            fn arch(&self) -> &'static str {
                "constant"
            }
            fn penultimate(&self, x: &Array4<f64>) -> Array2<f64> {
                Array2::zeros((x.dim().0, 1))
            }
        }
        let ds = small_dataset(2, 4, 4);
        let mut f = Constant;
        let (pset, _) = ue_min_min(&ds, &mut f, &quick_cfg()).unwrap();
        assert_eq!(
            pset.max_abs(),
            0.0,
            "sign(0) = 0 must leave the zero initialization fixed"
        );
    }

    /// One inner step from delta = 0 on a linear model moves every
    /// coordinate by exactly -step * sign(W^T (softmax - onehot)).
    #[test]
    fn single_inner_step_matches_linear_closed_form() {
        let ds = {
            // Interior pixels keep the image-box projection inactive.
            let mut ds = small_dataset(2, 2, 5);
            ds.train.pixels.mapv_inplace(|v| 0.3 + 0.4 * v);
            ds
        };
        let mut rng = rng_for(6, "baseline-linear");
        let mut f = LinearTestModel::new((3, 8, 8), 2, &mut rng);
        let cfg = MinMinConfig {
            outer_steps: 1,
            inner_steps: 1,
            max_rounds: 1,
            batch_size: 4,
            lr: 0.0, // keep the model where the oracle reads it
            seed: 7,
            ..Default::default()
        };

        // Oracle gradient at delta = 0 with the same (frozen) weights.
        let logits = f.forward_inference(&ds.train.pixels);
        let (_, dl) = softmax_ce(&logits.view(), &ds.train.labels);
        let gx_flat = dl.dot(&f.weight_matrix().t().to_owned());

        let (pset, _) = ue_min_min(&ds, &mut f, &cfg).unwrap();
        let step = cfg.epsilon * cfg.step_frac;
        let got = pset.deltas.as_slice().unwrap();
        let want: Vec<f64> = gx_flat.iter().map(|&g| -step * sign(g)).collect();
        for (i, (g, w)) in got.iter().zip(&want).enumerate() {
            assert!(
                (g - w).abs() < 1e-12,
                "coordinate {i}: got {g}, want {w} (projection should be inactive)"
            );
        }
    }

    #[test]
    fn rue_with_zero_radius_reduces_to_ue_exactly() {
        let ds = small_dataset(2, 4, 8);
        let cfg = MinMinConfig { rho_a: 0.0, ..quick_cfg() };
        let mut f1 = build_classifier("cnn6", 2, 2, 9).unwrap();
        let (ue, _) = ue_min_min(&ds, f1.as_mut(), &cfg).unwrap();
        let mut f2 = build_classifier("cnn6", 2, 2, 9).unwrap();
        let (rue, _) = rue_min_min_max(&ds, f2.as_mut(), &cfg).unwrap();
        let a: Vec<u64> = ue.deltas.iter().map(|v| v.to_bits()).collect();
        let b: Vec<u64> = rue.deltas.iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b, "rho_a = 0 must reproduce the plain trajectory bit for bit");
        assert!(rue.simplified, "the robust variant must be marked simplified");
    }

    #[test]
    fn rue_max_step_stays_within_its_radius_and_min_step_reduces_loss() {
        let ds = small_dataset(2, 6, 10);
        let mut f = build_classifier("cnn6", 2, 2, 11).unwrap();
        let cfg = MinMinConfig { rho_a: 2.0 / 255.0, ..quick_cfg() };
        let (pset, report) = rue_min_min_max(&ds, f.as_mut(), &cfg).unwrap();
        assert!(pset.max_abs() <= cfg.epsilon + 1e-15, "delta budget");

        // The max step's own budget is enforced by adversarial_step; check
        // the observable consequence on a fixed batch: hardening raises the
        // loss, the following minimization brings it back down.
        let x = ds.train.pixels.clone();
        let y = &ds.train.labels;
        let base = &x + &pset.deltas;
        let adv = adversarial_step(f.as_mut(), &base, y, cfg.rho_a, cfg.adv_steps);
        let dev = (&adv - &base).iter().fold(0.0f64, |a, v| a.max(v.abs()));
        assert!(dev <= cfg.rho_a + 1e-15, "max step must respect rho_a, got {dev}");

        let ce_at = |f: &dyn ImageClassifier, pts: &Array4<f64>| {
            let (ce, _) = softmax_ce(&f.forward_inference(pts).view(), y);
            ce
        };
        let after_max = ce_at(f.as_ref(), &adv);
        let after_min = *report.round_losses.last().unwrap();
        assert!(
            after_min <= after_max,
            "minimized loss {after_min} should not exceed hardened loss {after_max}"
        );
    }

    #[test]
    fn lsp_grid_geometry_and_scaling_are_exact() {
        let pset = lsp_patches(3, (3, 32, 32), 8, 8.0 / 255.0, 12).unwrap();
        assert_eq!(pset.mode, PerturbationMode::ClassWise);
        assert_eq!(pset.deltas.dim(), (3, 3, 32, 32));
        assert!(pset.simplified);

        for k in 0..3 {
            // Every 8x8 patch is constant.
            for c in 0..3usize {
                for py in 0..4 {
                    for px in 0..4 {
                        let v = pset.deltas[[k, c, py * 8, px * 8]];
                        for y in 0..8 {
                            for x in 0..8 {
                                assert_eq!(
                                    pset.deltas[[k, c, py * 8 + y, px * 8 + x]],
                                    v,
                                    "patch ({py},{px}) class {k} channel {c} must be constant"
                                );
                            }
                        }
                    }
                }
            }
            // The max magnitude is exactly epsilon.
            let m = pset
                .deltas
                .index_axis(Axis(0), k)
                .iter()
                .fold(0.0f64, |a, v| a.max(v.abs()));
            assert!(
                (m - 8.0 / 255.0).abs() < 1e-12,
                "class {k} must be scaled to max |delta| = epsilon, got {m}"
            );
        }
    }

    #[test]
    fn lsp_patch_equal_to_side_gives_one_color_per_class() {
        let pset = lsp_patches(2, (3, 16, 16), 16, 0.03, 13).unwrap();
        for k in 0..2usize {
            for c in 0..3usize {
                let plane = pset.deltas.slice(ndarray::s![k, c, .., ..]);
                let v = plane[[0, 0]];
                assert!(
                    plane.iter().all(|&p| p == v),
                    "class {k} channel {c} must be a single constant color"
                );
            }
        }
    }

    #[test]
    fn lsp_classes_differ_and_indivisible_patch_errors() {
        let pset = lsp_patches(4, (3, 16, 16), 4, 0.03, 14).unwrap();
        for a in 0..4 {
            for b in (a + 1)..4 {
                let d = (&pset.deltas.index_axis(Axis(0), a)
                    - &pset.deltas.index_axis(Axis(0), b))
                    .iter()
                    .fold(0.0f64, |acc, v| acc.max(v.abs()));
                assert!(d > 0.0, "classes {a} and {b} must receive distinct deltas");
            }
        }
        let err = lsp_patches(2, (3, 16, 16), 5, 0.03, 15);
        assert!(matches!(err, Err(SegueError::Config(_))), "5 does not divide 16");
    }

    #[test]
    fn classwise_random_is_reproducible_and_classes_are_far_apart() {
        let eps = 8.0 / 255.0;
        let a = classwise_random(5, (3, 8, 8), eps, 16).unwrap();
        let b = classwise_random(5, (3, 8, 8), eps, 16).unwrap();
        assert_eq!(
            a.deltas.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.deltas.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            "same seed must reproduce the same tensors"
        );
        assert!(a.max_abs() <= eps);
        for i in 0..5 {
            for j in (i + 1)..5 {
                let d = (&a.deltas.index_axis(Axis(0), i) - &a.deltas.index_axis(Axis(0), j))
                    .iter()
                    .fold(0.0f64, |acc, v| acc.max(v.abs()));
                assert!(
                    d > eps / 2.0,
                    "classes {i},{j} should differ by more than eps/2 in L-infinity, got {d}"
                );
            }
        }
    }

    #[test]
    fn container_round_trips_and_rejects_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("set.sgpb");
        let pset = classwise_random(3, (3, 8, 8), 0.02, 17).unwrap();
        save_perturbation_set(&pset, &path).unwrap();
        let back = load_perturbation_set(&path).unwrap();
        assert_eq!(back.mode, pset.mode);
        assert_eq!(back.method, "classwise_random");
        assert_eq!(back.epsilon, pset.epsilon);
        assert_eq!(
            back.deltas.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            pset.deltas.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(back.params, pset.params);

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_perturbation_set(&path), Err(SegueError::Format { .. })));

        let good = {
            bytes[0] = b'S';
            bytes.truncate(bytes.len() - 4);
            std::fs::write(&path, &bytes).unwrap();
            load_perturbation_set(&path)
        };
        assert!(matches!(good, Err(SegueError::Format { .. })), "truncation must be detected");
    }

    #[test]
    fn apply_classwise_indexes_by_label_and_checks_range() {
        let dir = tempfile::tempdir().unwrap();
        let ds = small_dataset(2, 3, 18);
        let pset = classwise_random(2, (3, 8, 8), 8.0 / 255.0, 19).unwrap();
        let report = apply_perturbation_set(&ds, &pset, dir.path()).unwrap();
        assert_eq!(report.images, 6);
        let exported = crate::core::load_dataset(&report.manifest_path).unwrap();
        assert_eq!(exported.train.labels, ds.train.labels, "labels pass through untouched");
        let prov = exported.provenance.expect("exported sets carry provenance");
        assert_eq!(prov.generator_checkpoint, "baseline:classwise_random");

        // Quantization moves pixels by at most half a level on top of the
        // clipped delta.
        let diff = (&exported.train.pixels - &ds.train.pixels)
            .iter()
            .fold(0.0f64, |a, v| a.max(v.abs()));
        assert!(diff <= pset.epsilon + 0.5 / 255.0 + 1e-12);

        // A one-class set cannot serve two-class data.
        let narrow = classwise_random(1, (3, 8, 8), 0.02, 20).unwrap();
        let err = apply_perturbation_set(&ds, &narrow, dir.path());
        assert!(matches!(err, Err(SegueError::Config(_))), "label out of range must error");
    }

    #[test]
    fn apply_samplewise_requires_matching_count() {
        let dir = tempfile::tempdir().unwrap();
        let ds = small_dataset(2, 3, 21);
        let pset = PerturbationSet {
            mode: PerturbationMode::SampleWise,
            deltas: Array4::zeros((4, 3, 8, 8)), // dataset has 6 train images
            epsilon: 0.02,
            method: "ue".into(),
            simplified: false,
            params: BTreeMap::new(),
        };
        let err = apply_perturbation_set(&ds, &pset, dir.path());
        assert!(matches!(err, Err(SegueError::Config(_))));
    }

    #[test]
    fn probe_separates_classwise_deltas_but_not_iid_noise() {
        // Class-wise deltas replicated per sample are trivially linearly
        // separable; unlabeled i.i.d. sample-wise noise is not. This is the
        // structural property that makes class-wise noise an effective
        // shortcut. (The probe itself lives in the evaluation module's
        // tests; here we check the raw construction distances that imply
        // it: within-class distance 0, between-class distance > 0.)
        let pset = classwise_random(3, (3, 8, 8), 0.03, 22).unwrap();
        let lbls = [0u32, 1, 2, 0, 1, 2];
        let rows: Vec<usize> = lbls.iter().map(|&y| y as usize).collect();
        let per_sample = gather(&pset.deltas, &rows);
        for (i, &yi) in lbls.iter().enumerate() {
            for (j, &yj) in lbls.iter().enumerate() {
                let d = (&per_sample.index_axis(Axis(0), i)
                    - &per_sample.index_axis(Axis(0), j))
                    .iter()
                    .fold(0.0f64, |a, v| a.max(v.abs()));
                if yi == yj {
                    assert_eq!(d, 0.0, "same class must share one delta ({i},{j})");
                } else {
                    assert!(d > 0.0, "different classes must differ ({i},{j})");
                }
            }
        }
        let _ = ImageBatch { pixels: per_sample, labels: lbls.to_vec() };
    }
}
