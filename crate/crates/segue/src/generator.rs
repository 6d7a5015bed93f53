//! The perturbation generator: an encoder–decoder network mapping an image
//! plus a side-information code to a bounded perturbation.
//!
//! The encoder downsamples three times (stride-2 conv blocks) to a
//! bottleneck at 1/8 resolution. There the side information — one bit per
//! channel, broadcast spatially — is concatenated and fused back to the
//! bottleneck width by a 1x1 conv block. The decoder mirrors the encoder
//! with nearest-neighbor upsampling, and the output head squashes through
//! `epsilon * tanh` so the perturbation respects the budget by
//! construction; a hard clip backs that up for certainty.
//!
//! Trained once, the generator produces perturbations for any number of
//! images (and, via the side-code width, for datasets with different class
//! counts) in a single forward pass per batch.

use std::path::{Path, PathBuf};

use ndarray::{concatenate, s, Array2, Array4, Axis};
use serde::{Deserialize, Serialize};

use crate::core::{apply_and_quantize, export_unlearnable, ApplyStats, Dataset, ImageBatch,
    Perturbation, QuantizationPolicy, UnlearnableProvenance};
use crate::nn::{Conv2d, ConvBlock, Mode, Param, Tanh, Upsample2x};
use crate::side_info::encode_labels;
use crate::util::io;
use crate::util::rng::rng_for;
use crate::{Result, SegueError};

/// How much the three encoder stages downsample in total; input sides must
/// be padded to a multiple of this before a forward pass.
pub const DOWNSAMPLE_FACTOR: usize = 8;

/// Architecture knobs. The defaults are the desk-scale shape used
/// throughout: channel widths 32-64-128 and a 16-bit side code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    /// Encoder channel widths, shallow to deep; the decoder mirrors them.
    pub widths: [usize; 3],
    /// Bits in the side-information code (also the number of fused
    /// channels).
    pub label_bits: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig { widths: [32, 64, 128], label_bits: 16 }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.iter().any(|&w| w == 0) {
            return Err(SegueError::Config("generator widths must be positive".into()));
        }
        if !(1..=32).contains(&self.label_bits) {
            return Err(SegueError::Config("label_bits must be in 1..=32".into()));
        }
        Ok(())
    }
}

/// The encoder–fusion–decoder perturbation generator.
#[derive(Debug, Clone)]
pub struct GeneratorModel {
    enc1: ConvBlock,
    enc2: ConvBlock,
    enc3: ConvBlock,
    fuse: ConvBlock,
    dec1: ConvBlock,
    dec2: ConvBlock,
    dec3: ConvBlock,
    head: Conv2d,
    out_tanh: Tanh,
    config: GeneratorConfig,
    cached_eps: f64,
}

impl GeneratorModel {
    pub fn new(config: GeneratorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let [c1, c2, c3] = config.widths;
        let b = config.label_bits;
        let mut rng = rng_for(seed, "generator-init");
        Ok(GeneratorModel {
            enc1: ConvBlock::new(3, c1, 3, 2, &mut rng),
            enc2: ConvBlock::new(c1, c2, 3, 2, &mut rng),
            enc3: ConvBlock::new(c2, c3, 3, 2, &mut rng),
            fuse: ConvBlock::new(c3 + b, c3, 1, 1, &mut rng),
            dec1: ConvBlock::new(c3, c2, 3, 1, &mut rng),
            dec2: ConvBlock::new(c2, c1, 3, 1, &mut rng),
            dec3: ConvBlock::new(c1, c1, 3, 1, &mut rng),
            head: Conv2d::new(c1, 3, 3, 1, 1, &mut rng),
            out_tanh: Tanh::new(),
            config,
            cached_eps: 0.0,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    fn blocks_mut(&mut self) -> [&mut ConvBlock; 7] {
        [
            &mut self.enc1,
            &mut self.enc2,
            &mut self.enc3,
            &mut self.fuse,
            &mut self.dec1,
            &mut self.dec2,
            &mut self.dec3,
        ]
    }

    fn blocks(&self) -> [&ConvBlock; 7] {
        [&self.enc1, &self.enc2, &self.enc3, &self.fuse, &self.dec1, &self.dec2, &self.dec3]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut ps = Vec::new();
        ps.extend(self.enc1.params_mut());
        ps.extend(self.enc2.params_mut());
        ps.extend(self.enc3.params_mut());
        ps.extend(self.fuse.params_mut());
        ps.extend(self.dec1.params_mut());
        ps.extend(self.dec2.params_mut());
        ps.extend(self.dec3.params_mut());
        ps.extend(self.head.params_mut());
        ps
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    pub fn num_params(&mut self) -> usize {
        self.params_mut().iter().map(|p| p.len()).sum()
    }

    /// Full trainable + running state, flattened in a fixed order:
    /// parameters first, then every batch-norm's running mean and variance.
    /// This is the exact payload a checkpoint stores.
    pub fn state_values(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for b in self.blocks() {
            out.extend(b.conv.w.value.iter());
            out.extend(b.conv.b.value.iter());
            out.extend(b.bn.gamma.value.iter());
            out.extend(b.bn.beta.value.iter());
        }
        out.extend(self.head.w.value.iter());
        out.extend(self.head.b.value.iter());
        for b in self.blocks() {
            let (mean, var) = b.bn.running_stats();
            out.extend(mean.iter());
            out.extend(var.iter());
        }
        out
    }

    /// Inverse of [`state_values`](Self::state_values).
    pub fn load_state_values(&mut self, vals: &[f64]) -> Result<()> {
        let want = self.state_values().len();
        if vals.len() != want {
            return Err(SegueError::Config(format!(
                "state blob has {} values, model needs {want}",
                vals.len()
            )));
        }
        let mut it = vals.iter().copied();
        let mut fill = |arr: &mut [f64]| {
            for v in arr {
                *v = it.next().expect("length checked above");
            }
        };
        for b in self.blocks_mut() {
            fill(b.conv.w.value.as_slice_mut().expect("contiguous"));
            fill(b.conv.b.value.as_slice_mut().expect("contiguous"));
            fill(b.bn.gamma.value.as_slice_mut().expect("contiguous"));
            fill(b.bn.beta.value.as_slice_mut().expect("contiguous"));
        }
        fill(self.head.w.value.as_slice_mut().expect("contiguous"));
        fill(self.head.b.value.as_slice_mut().expect("contiguous"));
        for b in self.blocks_mut() {
            let (mean, var) = b.bn.running_stats_mut();
            fill(mean.as_slice_mut().expect("contiguous"));
            fill(var.as_slice_mut().expect("contiguous"));
        }
        Ok(())
    }

    fn check_input(&self, x: &Array4<f64>, side: &Array2<f64>) {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, 3, "generator expects 3-channel input");
        assert!(
            h % DOWNSAMPLE_FACTOR == 0 && w % DOWNSAMPLE_FACTOR == 0,
            "generator input sides must be multiples of {DOWNSAMPLE_FACTOR}, got {h}x{w}"
        );
        assert_eq!(side.nrows(), n, "one side code per image");
        assert_eq!(side.ncols(), self.config.label_bits, "side code width mismatch");
    }

    /// Training-mode forward. Returns the pre-clip perturbation
    /// `epsilon * tanh(head)`, which already satisfies |delta| < epsilon;
    /// callers apply the hard clip via [`Perturbation::clipped`] when
    /// exporting. Caches activations for [`backward`](Self::backward).
    pub fn forward(
        &mut self,
        x: &Array4<f64>,
        side: &Array2<f64>,
        epsilon: f64,
        mode: Mode,
    ) -> Array4<f64> {
        self.check_input(x, side);
        self.cached_eps = epsilon;
        let h1 = self.enc1.forward(x, mode, true);
        let h2 = self.enc2.forward(&h1, mode, true);
        let h3 = self.enc3.forward(&h2, mode, true);
        let (_, _, bh, bw) = h3.dim();
        let side_ch = crate::side_info::embedding_to_channels(side, bh, bw);
        let cat = concatenate(Axis(1), &[h3.view(), side_ch.view()])
            .expect("bottleneck and side channels share N, H, W");
        let f = self.fuse.forward(&cat, mode, true);
        let d = self.dec1.forward(&Upsample2x::forward(&f), mode, true);
        let d = self.dec2.forward(&Upsample2x::forward(&d), mode, true);
        let d = self.dec3.forward(&Upsample2x::forward(&d), mode, true);
        let raw = self.head.forward(&d, true);
        self.out_tanh.forward(&raw, true) * epsilon
    }

    /// Inference without caches or running-stat updates; bit-for-bit
    /// deterministic for a given state.
    pub fn forward_inference(&self, x: &Array4<f64>, side: &Array2<f64>, epsilon: f64) -> Array4<f64> {
        self.check_input(x, side);
        let h1 = self.enc1.infer(x);
        let h2 = self.enc2.infer(&h1);
        let h3 = self.enc3.infer(&h2);
        let (_, _, bh, bw) = h3.dim();
        let side_ch = crate::side_info::embedding_to_channels(side, bh, bw);
        let cat = concatenate(Axis(1), &[h3.view(), side_ch.view()])
            .expect("bottleneck and side channels share N, H, W");
        let f = self.fuse.infer(&cat);
        let d = self.dec1.infer(&Upsample2x::forward(&f));
        let d = self.dec2.infer(&Upsample2x::forward(&d));
        let d = self.dec3.infer(&Upsample2x::forward(&d));
        self.out_tanh.infer(&self.head.infer(&d)) * epsilon
    }

    /// Accumulate parameter gradients for a loss gradient w.r.t. the
    /// pre-clip output. Consumes the caches of the preceding
    /// [`forward`](Self::forward); gradients w.r.t. the input image are not
    /// computed (nothing upstream needs them).
    pub fn backward(&mut self, gdelta: &Array4<f64>) {
        let c3 = self.config.widths[2];
        let gt = gdelta * self.cached_eps;
        let gh = self.out_tanh.backward(&gt);
        let g = self
            .head
            .backward(&gh, true, true)
            .expect("input gradient requested");
        let g = self.dec3.backward(&g, true, true).expect("input gradient requested");
        let g = Upsample2x::backward(&g);
        let g = self.dec2.backward(&g, true, true).expect("input gradient requested");
        let g = Upsample2x::backward(&g);
        let g = self.dec1.backward(&g, true, true).expect("input gradient requested");
        let g = Upsample2x::backward(&g);
        let gcat = self.fuse.backward(&g, true, true).expect("input gradient requested");
        let genc = gcat.slice(s![.., 0..c3, .., ..]).to_owned();
        let g = self.enc3.backward(&genc, true, true).expect("input gradient requested");
        let g = self.enc2.backward(&g, true, true).expect("input gradient requested");
        // The first block's input gradient would be d loss / d image, which
        // nothing consumes — skip the work.
        self.enc1.backward(&g, false, true);
    }
}

/// Replicate-pad the bottom/right edges so both sides become multiples of
/// `m`; returns the padded batch (or a cheap clone when already aligned).
fn pad_to_multiple(x: &Array4<f64>, m: usize) -> Array4<f64> {
    let (n, c, h, w) = x.dim();
    let hp = h.div_ceil(m) * m;
    let wp = w.div_ceil(m) * m;
    if hp == h && wp == w {
        return x.clone();
    }
    let mut out = Array4::<f64>::zeros((n, c, hp, wp));
    for i in 0..n {
        for ch in 0..c {
            for y in 0..hp {
                for xq in 0..wp {
                    out[[i, ch, y, xq]] = x[[i, ch, y.min(h - 1), xq.min(w - 1)]];
                }
            }
        }
    }
    out
}

/// Generate a budget-bounded perturbation for a batch, guided by one label
/// per sample. Inputs of any size are handled by replicate-padding to the
/// generator's alignment and cropping the result back.
pub fn generate_perturbation(
    g: &GeneratorModel,
    x: &Array4<f64>,
    guide: &[u32],
    epsilon: f64,
) -> Result<Perturbation> {
    let (n, _, h, w) = x.dim();
    if guide.len() != n {
        return Err(SegueError::Config(format!(
            "{} guide labels for {n} images",
            guide.len()
        )));
    }
    if epsilon <= 0.0 {
        return Err(SegueError::Config("epsilon must be positive".into()));
    }
    let side = encode_labels(guide, g.config.label_bits)?;
    if n == 0 {
        return Perturbation::checked(x.clone(), epsilon);
    }
    let padded = pad_to_multiple(x, DOWNSAMPLE_FACTOR);
    let delta = g.forward_inference(&padded, &side, epsilon);
    let delta = delta.slice(s![.., .., 0..h, 0..w]).to_owned();
    Ok(Perturbation::clipped(delta, epsilon))
}

/// Where the guide labels for protection come from.
#[derive(Debug, Clone)]
pub enum SideSource {
    /// The dataset's own labels.
    TrueLabels,
    /// Externally assigned pseudo labels (e.g. cluster indices), one per
    /// train image.
    PseudoLabels(Vec<u32>),
}

/// Result of protecting a dataset: where the export landed plus budget
/// statistics.
#[derive(Debug)]
pub struct ProtectReport {
    pub manifest_path: PathBuf,
    pub stats: ApplyStats,
    pub images: usize,
}

/// Perturb and quantize a dataset's train split in memory — the
/// generation step of [`protect_dataset`] without the disk export, so
/// callers can time or inspect it in isolation.
pub fn perturb_train_split(
    g: &GeneratorModel,
    dataset: &Dataset,
    side: &SideSource,
    epsilon: f64,
) -> Result<(ImageBatch, ApplyStats)> {
    let n = dataset.train.len();
    let guide: Vec<u32> = match side {
        SideSource::TrueLabels => dataset.train.labels.clone(),
        SideSource::PseudoLabels(pseudo) => {
            if pseudo.len() != n {
                return Err(SegueError::Config(format!(
                    "{} pseudo labels for {n} train images",
                    pseudo.len()
                )));
            }
            pseudo.clone()
        }
    };

    let policy = QuantizationPolicy::default();
    let mut perturbed = dataset.train.pixels.clone();
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
        let batch = dataset.train.select(&idx);
        let delta = generate_perturbation(g, &batch.pixels, &guide[start..end], epsilon)?;
        let (quantized, s) = apply_and_quantize(&batch, &delta, &policy)?;
        perturbed
            .slice_mut(s![start..end, .., .., ..])
            .assign(&quantized.pixels);
        stats.max_delta_pre = stats.max_delta_pre.max(s.max_delta_pre);
        stats.max_levels_post = stats.max_levels_post.max(s.max_levels_post);
        stats.per_image_max_delta.extend(s.per_image_max_delta);
        start = end;
    }

    let train_out = ImageBatch::new(perturbed, dataset.train.labels.clone())?;
    Ok((train_out, stats))
}

/// Apply the generator to a full dataset's train split and export the
/// result (perturbed train, untouched test) with provenance. Works for any
/// class count whose labels fit the generator's side-code width.
pub fn protect_dataset(
    g: &GeneratorModel,
    dataset: &Dataset,
    side: &SideSource,
    epsilon: f64,
    checkpoint_id: &str,
    out_dir: &Path,
) -> Result<ProtectReport> {
    let n = dataset.train.len();
    let (train_out, stats) = perturb_train_split(g, dataset, side, epsilon)?;
    let provenance = UnlearnableProvenance {
        source_manifest: dataset.name.clone(),
        generator_checkpoint: checkpoint_id.to_string(),
        epsilon,
        max_observed_delta: stats.max_delta_pre,
    };
    let manifest_path = export_unlearnable(
        dataset,
        &train_out,
        &stats.per_image_max_delta,
        provenance,
        out_dir,
    )?;
    Ok(ProtectReport { manifest_path, stats, images: n })
}

// ---------------------------------------------------------------------------
// Checkpointing
// ---------------------------------------------------------------------------

const CKPT_MAGIC: &[u8; 4] = b"SGCK";
const CKPT_VERSION: u32 = 1;
/// Side length of the self-verification fixture stored in every checkpoint.
const FIXTURE_HW: usize = 8;
const FIXTURE_N: usize = 2;

/// Everything about a trained generator besides its weights.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: GeneratorConfig,
    /// The budget the generator was trained for; the default at
    /// application time.
    pub epsilon: f64,
    pub dataset_id: String,
    pub epochs_run: usize,
    pub final_loss_f: f64,
    pub final_loss_g: f64,
    pub seed: u64,
    /// Wall-clock save time (unix seconds). The single field exempt from
    /// byte-identity between reruns.
    pub created_unix: u64,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    meta: CheckpointMeta,
    state_len: usize,
    fixture_n: usize,
    fixture_hw: usize,
    fixture_labels: Vec<u32>,
}

fn push_f64s(buf: &mut Vec<u8>, vals: impl IntoIterator<Item = f64>) {
    for v in vals {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn read_f64s(bytes: &[u8], count: usize, path: &Path) -> Result<Vec<f64>> {
    if bytes.len() < count * 8 {
        return Err(SegueError::format(path, "checkpoint truncated"));
    }
    Ok(bytes[..count * 8]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk is 8 bytes")))
        .collect())
}

/// Deterministic self-verification input embedded in every checkpoint.
fn fixture_input() -> (Array4<f64>, Vec<u32>) {
    let mut rng = rng_for(0x5347_434b, "ckpt-fixture");
    let x = Array4::from_shape_fn((FIXTURE_N, 3, FIXTURE_HW, FIXTURE_HW), |_| {
        rand::Rng::random_range(&mut rng, 0.0..1.0)
    });
    (x, vec![0, 1])
}

/// Serialize a generator with metadata. The file embeds a fixture
/// input/output pair; loading replays it and refuses checkpoints whose
/// forwards do not reproduce bit-for-bit.
pub fn save_checkpoint(g: &GeneratorModel, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    let state = g.state_values();
    let (fx, fy) = fixture_input();
    let side = encode_labels(&fy, g.config.label_bits)?;
    let fout = g.forward_inference(&fx, &side, meta.epsilon);

    let header = CheckpointHeader {
        meta: meta.clone(),
        state_len: state.len(),
        fixture_n: FIXTURE_N,
        fixture_hw: FIXTURE_HW,
        fixture_labels: fy,
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| SegueError::Runtime(format!("checkpoint header serialization: {e}")))?;

    let mut buf = Vec::with_capacity(16 + header_json.len() + state.len() * 8);
    buf.extend_from_slice(CKPT_MAGIC);
    buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header_json);
    push_f64s(&mut buf, state);
    push_f64s(&mut buf, fx.iter().copied());
    push_f64s(&mut buf, fout.iter().copied());
    io::write_atomic(path, &buf)
}

/// Load a checkpoint, rebuild the generator, and replay the embedded
/// fixture pair as a self-check.
pub fn load_checkpoint(path: &Path) -> Result<(GeneratorModel, CheckpointMeta)> {
    let bytes = io::read_bytes(path)?;
    if bytes.len() < 16 {
        return Err(SegueError::format(path, "checkpoint truncated"));
    }
    if &bytes[0..4] != CKPT_MAGIC {
        return Err(SegueError::format(path, "not a generator checkpoint (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CKPT_VERSION {
        return Err(SegueError::format(
            path,
            format!("unsupported checkpoint version {version} (this build reads {CKPT_VERSION})"),
        ));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(16..16 + header_len).ok_or_else(|| {
        SegueError::format(path, "checkpoint truncated inside header")
    })?;
    let header: CheckpointHeader = serde_json::from_slice(body)
        .map_err(|e| SegueError::format(path, format!("checkpoint header: {e}")))?;

    let mut g = GeneratorModel::new(header.meta.config, 0)?;
    let rest = &bytes[16 + header_len..];
    let state = read_f64s(rest, header.state_len, path)?;
    g.load_state_values(&state)?;

    let fix_len = header.fixture_n * 3 * header.fixture_hw * header.fixture_hw;
    let rest = &rest[header.state_len * 8..];
    let fx_vals = read_f64s(rest, fix_len, path)?;
    let fout_vals = read_f64s(&rest[fix_len * 8..], fix_len, path)?;
    let fx = Array4::from_shape_vec(
        (header.fixture_n, 3, header.fixture_hw, header.fixture_hw),
        fx_vals,
    )
    .expect("length computed from shape");

    let side = encode_labels(&header.fixture_labels, g.config.label_bits)?;
    let replay = g.forward_inference(&fx, &side, header.meta.epsilon);
    let matches = replay
        .iter()
        .zip(fout_vals.iter())
        .all(|(a, b)| a.to_bits() == b.to_bits());
    if !matches {
        return Err(SegueError::format(
            path,
            "checkpoint failed self-verification: replayed forward differs from stored output",
        ));
    }
    Ok((g, header.meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::core::{load_dataset, synthesize_fixture, write_dataset, FixtureParams};
    use ndarray::Array4;
    use rand::Rng;

    const EPS: f64 = 8.0 / 255.0;

    fn tiny_config() -> GeneratorConfig {
        GeneratorConfig { widths: [2, 3, 4], label_bits: 4 }
    }

    fn random_batch(n: usize, h: usize, w: usize, seed: u64) -> Array4<f64> {
        let mut rng = rng_for(seed, "gen-test");
        Array4::from_shape_fn((n, 3, h, w), |_| rng.random_range(0.0..1.0))
    }

    #[test]
    fn output_shape_matches_input_shape() {
        let g = GeneratorModel::new(tiny_config(), 1).unwrap();
        for (h, w) in [(8, 8), (16, 16), (16, 24)] {
            let x = random_batch(2, h, w, 2);
            let side = encode_labels(&[0, 1], 4).unwrap();
            let d = g.forward_inference(&x, &side, EPS);
            assert_eq!(d.dim(), x.dim(), "shape must be preserved at {h}x{w}");
        }
    }

    #[test]
    fn budget_holds_even_for_extreme_weights_and_inputs() {
        let mut g = GeneratorModel::new(tiny_config(), 3).unwrap();
        // Blow the weights up so the head saturates; tanh must still bound.
        for p in g.params_mut() {
            p.value.mapv_inplace(|v| v * 100.0);
        }
        let mut x = random_batch(4, 8, 8, 4);
        x.mapv_inplace(|v| v * 10.0 - 5.0); // deliberately out of range
        let side = encode_labels(&[0, 1, 2, 3], 4).unwrap();
        let d = g.forward_inference(&x, &side, EPS);
        let max = d.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        assert!(max <= EPS, "|delta| = {max} exceeds the budget {EPS}");
    }

    #[test]
    fn same_input_twice_gives_identical_output() {
        let g = GeneratorModel::new(GeneratorConfig::default(), 5).unwrap();
        let x = random_batch(2, 16, 16, 6);
        let side = encode_labels(&[7, 7], 16).unwrap();
        let a = g.forward_inference(&x, &side, EPS);
        let b = g.forward_inference(&x, &side, EPS);
        assert_eq!(a, b, "inference must be deterministic");
    }

    #[test]
    fn side_code_and_image_both_influence_output() {
        let g = GeneratorModel::new(tiny_config(), 7).unwrap();
        let x = random_batch(1, 8, 8, 8);
        let d0 = g
            .forward_inference(&x, &encode_labels(&[0], 4).unwrap(), EPS);
        let d1 = g
            .forward_inference(&x, &encode_labels(&[3], 4).unwrap(), EPS);
        let side_dist = (&d0 - &d1).mapv(f64::abs).sum();
        assert!(side_dist > 0.0, "changing the side code must change the perturbation");

        let x2 = random_batch(1, 8, 8, 9);
        let d2 = g
            .forward_inference(&x2, &encode_labels(&[0], 4).unwrap(), EPS);
        let img_dist = (&d0 - &d2).mapv(f64::abs).sum();
        assert!(img_dist > 0.0, "changing the image must change the perturbation");
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let g = GeneratorModel::new(tiny_config(), 10).unwrap();
        let x = random_batch(2, 8, 8, 11);
        let side = encode_labels(&[1, 2], 4).unwrap();
        let mut rng = rng_for(12, "gen-fd");
        let obj = Array4::from_shape_fn(x.dim(), |_| rng.random_range(-1.0..1.0));

        // Analytic gradients on a fresh clone (train mode).
        let mut ga = g.clone();
        ga.zero_grad();
        let out = ga.forward(&x, &side, EPS, Mode::Train);
        assert_eq!(out.dim(), x.dim());
        ga.backward(&obj);
        let grads: Vec<f64> = ga
            .params_mut()
            .iter()
            .flat_map(|p| p.grad.iter().copied().collect::<Vec<_>>())
            .collect();

        // Probe a deterministic spread of coordinates.
        let total: usize = grads.len();
        let value = |model: &GeneratorModel| {
            let mut m = model.clone();
            (m.forward(&x, &side, EPS, Mode::Train) * &obj).sum()
        };
        let h = 1e-5;
        let mut checked = 0;
        for k in (0..total).step_by(total / 25) {
            let mut plus = g.clone();
            let mut minus = g.clone();
            bump_param(&mut plus, k, h);
            bump_param(&mut minus, k, -h);
            let fd = (value(&plus) - value(&minus)) / (2.0 * h);
            let an = grads[k];
            let denom = fd.abs().max(an.abs()).max(1e-6);
            assert!(
                (fd - an).abs() / denom < 1e-3,
                "param {k}: fd {fd} vs analytic {an}"
            );
            checked += 1;
        }
        assert!(checked >= 20, "expected to probe a spread of coordinates");
    }

    fn bump_param(g: &mut GeneratorModel, flat_index: usize, delta: f64) {
        let mut remaining = flat_index;
        for p in g.params_mut() {
            if remaining < p.len() {
                let slice = p.value.as_slice_mut().expect("contiguous");
                slice[remaining] += delta;
                return;
            }
            remaining -= p.len();
        }
        panic!("flat index {flat_index} out of range");
    }

    #[test]
    fn checkpoint_round_trip_is_bit_identical_and_carries_epsilon() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gen.ckpt");
        let mut g = GeneratorModel::new(tiny_config(), 13).unwrap();
        // Push some training-like state so running stats are non-trivial.
        let x = random_batch(4, 8, 8, 14);
        let side = encode_labels(&[0, 1, 2, 3], 4).unwrap();
        let _ = g.forward(&x, &side, EPS, Mode::Train);
        let meta = CheckpointMeta {
            config: tiny_config(),
            epsilon: EPS,
            dataset_id: "unit-fixture".into(),
            epochs_run: 3,
            final_loss_f: 0.5,
            final_loss_g: 0.25,
            seed: 13,
            created_unix: 1_700_000_000,
        };
        save_checkpoint(&g, &meta, &path).unwrap();
        let (loaded, meta2) = load_checkpoint(&path).unwrap();
        assert_eq!(meta2.epsilon, EPS, "epsilon must propagate through metadata");
        assert_eq!(meta2.dataset_id, "unit-fixture");

        let probe = random_batch(2, 16, 16, 15);
        let pside = encode_labels(&[1, 3], 4).unwrap();
        let a = g.forward_inference(&probe, &pside, EPS);
        let b = loaded.forward_inference(&probe, &pside, EPS);
        assert!(
            a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()),
            "round-tripped model must reproduce forwards bit-for-bit"
        );
    }

    #[test]
    fn corrupt_checkpoints_fail_cleanly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gen.ckpt");
        let g = GeneratorModel::new(tiny_config(), 16).unwrap();
        let meta = CheckpointMeta {
            config: tiny_config(),
            epsilon: EPS,
            dataset_id: "x".into(),
            epochs_run: 0,
            final_loss_f: 0.0,
            final_loss_g: 0.0,
            seed: 16,
            created_unix: 0,
        };
        save_checkpoint(&g, &meta, &path).unwrap();
        let full = std::fs::read(&path).unwrap();

        // Truncation at several depths.
        for cut in [2usize, 12, full.len() / 2, full.len() - 5] {
            std::fs::write(&path, &full[..cut]).unwrap();
            assert!(load_checkpoint(&path).is_err(), "truncated at {cut} must fail");
        }
        // Bad magic.
        let mut bad = full.clone();
        bad[0] = b'X';
        std::fs::write(&path, &bad).unwrap();
        assert!(load_checkpoint(&path).is_err(), "bad magic must fail");
        // Future version.
        let mut v2 = full.clone();
        v2[4..8].copy_from_slice(&99u32.to_le_bytes());
        std::fs::write(&path, &v2).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(
            err.to_string().contains("version"),
            "version mismatch should say so, got: {err}"
        );
        // Flipped weight bit breaks self-verification.
        let mut flipped = full.clone();
        let last = flipped.len() - fix_bytes() - 3;
        flipped[last] ^= 0x40;
        std::fs::write(&path, &flipped).unwrap();
        assert!(load_checkpoint(&path).is_err(), "tampered state must fail self-verification");
    }

    fn fix_bytes() -> usize {
        FIXTURE_N * 3 * FIXTURE_HW * FIXTURE_HW * 8 * 2
    }

    #[test]
    fn generate_perturbation_handles_unaligned_sizes_and_empty_batches() {
        let g = GeneratorModel::new(tiny_config(), 17).unwrap();
        let x = random_batch(2, 10, 14, 18);
        let p = generate_perturbation(&g, &x, &[0, 1], EPS).unwrap();
        assert_eq!(p.delta().dim(), (2, 3, 10, 14), "unaligned sizes pad and crop back");
        assert!(p.max_abs() <= EPS);

        let empty = Array4::<f64>::zeros((0, 3, 8, 8));
        let p = generate_perturbation(&g, &empty, &[], EPS).unwrap();
        assert_eq!(p.delta().dim().0, 0, "empty batch yields empty perturbation");
    }

    #[test]
    fn generate_perturbation_rejects_labels_beyond_code_width() {
        let g = GeneratorModel::new(tiny_config(), 19).unwrap();
        let x = random_batch(1, 8, 8, 20);
        let err = generate_perturbation(&g, &x, &[16], EPS);
        assert!(err.is_err(), "label 16 does not fit in 4 bits");
    }

    #[test]
    fn protect_dataset_exports_and_respects_budget() {
        let dir = tempfile::tempdir().unwrap();
        let params = FixtureParams {
            classes: 2,
            train_per_class: 3,
            test_per_class: 2,
            size: 8,
            ..Default::default()
        };
        let (train, test) = synthesize_fixture(&params, 21).unwrap();
        let src_dir = dir.path().join("clean");
        let manifest = write_dataset(&src_dir, "mini", 2, &train, &test, None, None).unwrap();
        let dataset = load_dataset(&manifest).unwrap();

        let g = GeneratorModel::new(tiny_config(), 22).unwrap();
        let out_dir = dir.path().join("protected");
        let report =
            protect_dataset(&g, &dataset, &SideSource::TrueLabels, EPS, "test-ckpt", &out_dir)
                .unwrap();
        assert_eq!(report.images, 6);
        assert!(report.stats.max_delta_pre <= EPS);
        assert!(report.stats.max_levels_post <= 9, "post-quantization slack is one level");

        let exported = load_dataset(&report.manifest_path).unwrap();
        assert_eq!(exported.name, "mini-unlearnable");
        assert_eq!(exported.train.labels, dataset.train.labels);
        assert_eq!(exported.test.pixels, dataset.test.pixels, "test split stays clean");
        let max_diff = (&exported.train.pixels - &dataset.train.pixels)
            .mapv(f64::abs)
            .iter()
            .cloned()
            .fold(0.0, f64::max);
        assert!(max_diff <= 9.0 / 255.0 + 1e-12, "stored deviation {max_diff} over slack");
        let prov = exported.provenance.expect("provenance recorded");
        assert_eq!(prov.generator_checkpoint, "test-ckpt");
        assert_eq!(prov.epsilon, EPS);
    }

    #[test]
    fn protect_twice_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let params = FixtureParams {
            classes: 2,
            train_per_class: 2,
            test_per_class: 1,
            size: 8,
            ..Default::default()
        };
        let (train, test) = synthesize_fixture(&params, 23).unwrap();
        let src_dir = dir.path().join("clean");
        let manifest = write_dataset(&src_dir, "mini", 2, &train, &test, None, None).unwrap();
        let dataset = load_dataset(&manifest).unwrap();
        let g = GeneratorModel::new(tiny_config(), 24).unwrap();

        let mut digests = Vec::new();
        for run in ["a", "b"] {
            let out = dir.path().join(run);
            let report =
                protect_dataset(&g, &dataset, &SideSource::TrueLabels, EPS, "ck", &out).unwrap();
            let mut bytes = std::fs::read(&report.manifest_path).unwrap();
            bytes.extend(std::fs::read(out.join("images/train/00000.png")).unwrap());
            digests.push(crate::util::hash::sha256_hex(&bytes));
        }
        assert_eq!(digests[0], digests[1], "same inputs must export identical bytes");
    }
}
