//! Two-stage alternating training of the surrogate classifier and the
//! perturbation generator.
//!
//! Epochs are 1-based. Every epoch with `epoch % cycle_len == 1` trains the
//! surrogate `f` on cross-entropy over generator-perturbed, distorted
//! images (the generator frozen); every other epoch trains the generator
//! `G` on `alpha * CE + beta * E[||delta||_2]` against the frozen
//! surrogate. With the default cycle length 5 that is one surrogate epoch
//! followed by four generator epochs per cycle.
//!
//! After every epoch the mean surrogate cross-entropy over the full train
//! set is measured on the *stored* artifact — perturbed, clamped,
//! quantized, no distortion — and training stops early once it drops below
//! `stop_loss`: at that point the exported dataset is maximally learnable
//! by the shortcut, i.e. unlearnable in substance.

use std::path::Path;
use std::time::Instant;

use ndarray::{Array2, Array4};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::core::{apply_and_quantize, Dataset, ImageBatch, Perturbation, QuantizationPolicy};
use crate::distortion::{apply_distortion, DistortionConfig};
use crate::generator::{GeneratorConfig, GeneratorModel};
use crate::nn::{build_classifier, softmax_ce, Adam, ImageClassifier, Mode};
use crate::side_info::encode_labels;
use crate::util::io;
use crate::util::rng::rng_for;
use crate::{Result, SegueError};

/// All knobs of the two-stage optimization. Defaults are the reference
/// values used throughout this crate.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Total epoch cap.
    pub epochs: usize,
    /// Cycle length; epoch % cycle_len == 1 is a surrogate epoch.
    pub cycle_len: usize,
    /// Surrogate learning rate.
    pub lr_f: f64,
    /// Generator learning rate.
    pub lr_g: f64,
    /// Weight of the cross-entropy term in the generator loss.
    pub alpha: f64,
    /// Weight of the perturbation-norm term in the generator loss.
    pub beta: f64,
    /// L-infinity perturbation budget.
    pub epsilon: f64,
    pub batch_size: usize,
    /// Early-stop threshold on the full-set surrogate loss.
    pub stop_loss: f64,
    pub seed: u64,
    pub surrogate_arch: String,
    /// Surrogate width multiplier; 0 picks the architecture default.
    pub surrogate_width: usize,
    pub generator: GeneratorConfig,
    pub distortion: DistortionConfig,
    /// Whether the surrogate stage also sees the distortion layer (the
    /// generator stage always does).
    pub distort_surrogate_stage: bool,
    /// Ablation switch: feed all-zero side channels into the generator
    /// while keeping the labels as classification targets.
    pub zero_side: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            cycle_len: 5,
            lr_f: 0.0005,
            lr_g: 0.0005,
            alpha: 1.0,
            beta: 0.001,
            epsilon: 8.0 / 255.0,
            batch_size: 64,
            stop_loss: 0.001,
            seed: 0,
            surrogate_arch: "cnn6".into(),
            surrogate_width: 0,
            generator: GeneratorConfig::default(),
            distortion: DistortionConfig::default(),
            distort_surrogate_stage: true,
            zero_side: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(SegueError::Config("epochs must be at least 1".into()));
        }
        if self.cycle_len < 2 {
            return Err(SegueError::Config(
                "cycle_len must be at least 2 (one surrogate epoch, then generator epochs)".into(),
            ));
        }
        for (name, v) in [("lr_f", self.lr_f), ("lr_g", self.lr_g), ("epsilon", self.epsilon)] {
            if v <= 0.0 {
                return Err(SegueError::Config(format!("{name} must be positive")));
            }
        }
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta)] {
            if v < 0.0 {
                return Err(SegueError::Config(format!("{name} must be non-negative")));
            }
        }
        if self.batch_size == 0 {
            return Err(SegueError::Config("batch_size must be positive".into()));
        }
        self.generator.validate()?;
        self.distortion.validate()
    }
}

/// Which parameter set an epoch updated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Surrogate,
    Generator,
}

/// What stage a 1-based epoch index falls on.
pub fn stage_of_epoch(epoch: usize, cycle_len: usize) -> Stage {
    if epoch % cycle_len == 1 {
        Stage::Surrogate
    } else {
        Stage::Generator
    }
}

/// One epoch's ledger line.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub stage: Stage,
    /// Mean optimized loss over the epoch's batches (CE for surrogate
    /// epochs, the weighted two-term loss for generator epochs).
    pub mean_loss: f64,
    /// Optimizer steps taken (= ceil(N / batch_size)).
    pub steps: usize,
    /// Stop metric measured after the epoch: mean surrogate CE over the
    /// full train set in stored form, distortion off.
    pub full_set_surrogate_loss: f64,
}

/// Outcome of a training run, minus the model itself.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub history: Vec<EpochRecord>,
    pub epochs_run: usize,
    pub stopped_early: bool,
    /// Mean loss of the last surrogate / generator epoch (NaN if that
    /// stage never ran).
    pub final_loss_f: f64,
    pub final_loss_g: f64,
    pub wall_seconds: f64,
}

fn side_codes(guide: &[u32], cfg: &TrainConfig) -> Result<Array2<f64>> {
    if cfg.zero_side {
        Ok(Array2::zeros((guide.len(), cfg.generator.label_bits)))
    } else {
        encode_labels(guide, cfg.generator.label_bits)
    }
}

fn check_finite(loss: f64, stage: Stage, epoch: usize, step: usize) -> Result<f64> {
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(SegueError::Runtime(format!(
            "non-finite loss {loss} in {stage:?} epoch {epoch}, step {step}"
        )))
    }
}

/// Surrogate-stage loss for one batch: cross-entropy of the surrogate on
/// distorted perturbed images, the generator frozen. Accumulates gradients
/// into the surrogate's parameters (callers zero them first); the returned
/// scalar is the loss value, so this doubles as the value function for
/// finite-difference checks.
pub fn surrogate_loss(
    f: &mut dyn ImageClassifier,
    g: &GeneratorModel,
    x: &Array4<f64>,
    guide: &[u32],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let side = side_codes(guide, cfg)?;
    let delta = g.forward_inference(x, &side, cfg.epsilon);
    let xh = x + &delta;
    let xd = if cfg.distort_surrogate_stage {
        apply_distortion(&xh, guide, Some(f), &cfg.distortion, rng, false)?.0
    } else {
        xh
    };
    let logits = f.forward(&xd, Mode::Train);
    let (loss, dl) = softmax_ce(&logits.view(), guide);
    f.backward(&dl, false, true);
    Ok(loss)
}

/// Generator-stage loss for one batch:
/// `alpha * CE(f(distort(x + delta)), guide) + beta * mean ||delta||_2`,
/// the surrogate frozen (evaluation mode, no weight gradients). Accumulates
/// gradients into the generator's parameters; returns the loss value.
pub fn generator_loss(
    f: &mut dyn ImageClassifier,
    g: &mut GeneratorModel,
    x: &Array4<f64>,
    guide: &[u32],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let n = x.dim().0;
    let side = side_codes(guide, cfg)?;
    let delta = g.forward(x, &side, cfg.epsilon, Mode::Train);
    // The hard clip the pipeline applies on export is the identity here:
    // |epsilon * tanh| < epsilon already, so gradients pass through whole.
    let xh = x + &delta;
    let (xd, trace) = apply_distortion(&xh, guide, Some(f), &cfg.distortion, rng, true)?;
    let logits = f.forward(&xd, Mode::Eval);
    let (ce, dl) = softmax_ce(&logits.view(), guide);

    let norms: Vec<f64> = delta
        .outer_iter()
        .map(|d| d.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let mean_norm = norms.iter().sum::<f64>() / n.max(1) as f64;
    let loss = cfg.alpha * ce + cfg.beta * mean_norm;

    let gxd = f
        .backward(&(dl * cfg.alpha), true, false)
        .expect("input gradient requested from frozen surrogate");
    let mut gdelta = trace.expect("trace requested").backward(&gxd);
    for (i, norm) in norms.iter().enumerate() {
        if *norm > 1e-12 {
            let scale = cfg.beta / (n as f64 * norm);
            gdelta
                .index_axis_mut(ndarray::Axis(0), i)
                .zip_mut_with(&delta.index_axis(ndarray::Axis(0), i), |gv, &dv| {
                    *gv += scale * dv;
                });
        }
    }
    g.backward(&gdelta);
    Ok(loss)
}

/// Mean surrogate cross-entropy over the full train set in stored form:
/// perturbation applied, clamped, quantized — distortion off. This is the
/// early-stop metric; it judges the artifact that would be exported.
pub fn full_set_surrogate_loss(
    f: &dyn ImageClassifier,
    g: &GeneratorModel,
    train: &ImageBatch,
    guide: &[u32],
    cfg: &TrainConfig,
) -> Result<f64> {
    let n = train.len();
    let policy = QuantizationPolicy::default();
    let mut total = 0.0;
    const BATCH: usize = 256;
    let mut start = 0;
    while start < n {
        let end = (start + BATCH).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let batch = train.select(&idx);
        let gb = &guide[start..end];
        let side = side_codes(gb, cfg)?;
        let delta = g.forward_inference(&batch.pixels, &side, cfg.epsilon);
        let stored = apply_and_quantize(
            &batch,
            &Perturbation::clipped(delta, cfg.epsilon),
            &policy,
        )?
        .0;
        let logits = f.forward_inference(&stored.pixels);
        let (loss, _) = softmax_ce(&logits.view(), gb);
        total += loss * (end - start) as f64;
        start = end;
    }
    Ok(total / n as f64)
}

/// Shuffled minibatch index blocks for one epoch.
fn epoch_batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size).map(|c| c.to_vec()).collect()
}

/// One full surrogate epoch: ceil(N / batch) Adam steps on `loss_f`, the
/// generator untouched. Returns (mean batch loss, steps).
pub fn train_surrogate_epoch(
    f: &mut dyn ImageClassifier,
    adam_f: &mut Adam,
    g: &GeneratorModel,
    train: &ImageBatch,
    guide: &[u32],
    cfg: &TrainConfig,
    epoch: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, usize)> {
    let batches = epoch_batches(train.len(), cfg.batch_size, rng);
    let mut sum = 0.0;
    for (step, idx) in batches.iter().enumerate() {
        let xb = train.select(idx);
        let yb: Vec<u32> = idx.iter().map(|&i| guide[i]).collect();
        f.zero_grad();
        let loss = surrogate_loss(f, g, &xb.pixels, &yb, cfg, rng)?;
        check_finite(loss, Stage::Surrogate, epoch, step)?;
        adam_f.step(&mut f.params_mut());
        sum += loss;
    }
    Ok((sum / batches.len() as f64, batches.len()))
}

/// One full generator epoch: ceil(N / batch) Adam steps on `loss_G`, the
/// surrogate untouched. Returns (mean batch loss, steps).
pub fn train_generator_epoch(
    f: &mut dyn ImageClassifier,
    g: &mut GeneratorModel,
    adam_g: &mut Adam,
    train: &ImageBatch,
    guide: &[u32],
    cfg: &TrainConfig,
    epoch: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, usize)> {
    let batches = epoch_batches(train.len(), cfg.batch_size, rng);
    let mut sum = 0.0;
    let mut max_abs_delta: f64 = 0.0;
    for (step, idx) in batches.iter().enumerate() {
        let xb = train.select(idx);
        let yb: Vec<u32> = idx.iter().map(|&i| guide[i]).collect();
        g.zero_grad();
        let loss = generator_loss(f, g, &xb.pixels, &yb, cfg, rng)?;
        check_finite(loss, Stage::Generator, epoch, step)?;
        adam_g.step(&mut g.params_mut());

        // Budget spot-check on the freshly updated generator.
        if step + 1 == batches.len() {
            let side = side_codes(&yb, cfg)?;
            let d = g.forward_inference(&xb.pixels, &side, cfg.epsilon);
            max_abs_delta = d.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        }
        sum += loss;
    }
    assert!(
        max_abs_delta <= cfg.epsilon,
        "budget violated during training: {max_abs_delta} > {}",
        cfg.epsilon
    );
    Ok((sum / batches.len() as f64, batches.len()))
}

/// Run the full two-stage schedule on a dataset's train split. `guide`
/// supplies the per-sample side information (true labels or pseudo
/// labels) and is also the classification target.
pub fn run_two_stage(
    dataset: &Dataset,
    guide: &[u32],
    cfg: &TrainConfig,
) -> Result<(GeneratorModel, Box<dyn ImageClassifier>, TrainReport)> {
    run_two_stage_with_stop(dataset, guide, cfg, None)
}

/// [`run_two_stage`] with the stop metric replaceable by a stub mapping the
/// epoch index to a loss value — a seam for exercising the schedule and
/// early-stop logic without real convergence.
pub fn run_two_stage_with_stop(
    dataset: &Dataset,
    guide: &[u32],
    cfg: &TrainConfig,
    mut stop_stub: Option<&mut dyn FnMut(usize) -> f64>,
) -> Result<(GeneratorModel, Box<dyn ImageClassifier>, TrainReport)> {
    cfg.validate()?;
    let train = &dataset.train;
    if guide.len() != train.len() {
        return Err(SegueError::Config(format!(
            "{} guide labels for {} train images",
            guide.len(),
            train.len()
        )));
    }
    if train.len() < cfg.batch_size {
        return Err(SegueError::Config(format!(
            "train split ({} images) is smaller than one batch ({})",
            train.len(),
            cfg.batch_size
        )));
    }
    let num_classes = guide.iter().map(|&y| y as usize + 1).max().unwrap_or(2).max(2);

    let started = Instant::now();
    let mut f = build_classifier(
        &cfg.surrogate_arch,
        num_classes,
        cfg.surrogate_width,
        crate::util::rng::derive_seed(cfg.seed, "surrogate-init"),
    )?;
    let mut g = GeneratorModel::new(
        cfg.generator,
        crate::util::rng::derive_seed(cfg.seed, "generator-init"),
    )?;
    let mut adam_f = Adam::new(cfg.lr_f);
    let mut adam_g = Adam::new(cfg.lr_g);
    let mut rng = rng_for(cfg.seed, "two-stage");

    let mut history: Vec<EpochRecord> = Vec::new();
    let mut stopped_early = false;
    let (mut final_f, mut final_g) = (f64::NAN, f64::NAN);

    for epoch in 1..=cfg.epochs {
        let stage = stage_of_epoch(epoch, cfg.cycle_len);
        let (mean_loss, steps) = match stage {
            Stage::Surrogate => {
                let r = train_surrogate_epoch(
                    f.as_mut(),
                    &mut adam_f,
                    &g,
                    train,
                    guide,
                    cfg,
                    epoch,
                    &mut rng,
                )?;
                final_f = r.0;
                r
            }
            Stage::Generator => {
                let r = train_generator_epoch(
                    f.as_mut(),
                    &mut g,
                    &mut adam_g,
                    train,
                    guide,
                    cfg,
                    epoch,
                    &mut rng,
                )?;
                final_g = r.0;
                r
            }
        };
        let stop_metric = match stop_stub.as_mut() {
            Some(stub) => stub(epoch),
            None => full_set_surrogate_loss(f.as_ref(), &g, train, guide, cfg)?,
        };
        history.push(EpochRecord {
            epoch,
            stage,
            mean_loss,
            steps,
            full_set_surrogate_loss: stop_metric,
        });
        if stop_metric < cfg.stop_loss {
            stopped_early = epoch < cfg.epochs;
            break;
        }
    }

    let report = TrainReport {
        epochs_run: history.len(),
        stopped_early,
        final_loss_f: final_f,
        final_loss_g: final_g,
        wall_seconds: started.elapsed().as_secs_f64(),
        history,
    };
    Ok((g, f, report))
}

/// Write the per-epoch loss curves as CSV.
pub fn write_loss_csv(history: &[EpochRecord], path: &Path) -> Result<()> {
    let mut out = String::from("epoch,stage,mean_loss,steps,full_set_surrogate_loss\n");
    for r in history {
        let stage = match r.stage {
            Stage::Surrogate => "surrogate",
            Stage::Generator => "generator",
        };
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.epoch, stage, r.mean_loss, r.steps, r.full_set_surrogate_loss
        ));
    }
    io::write_atomic(path, out.as_bytes())
}
