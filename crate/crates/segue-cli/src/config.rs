//! Training-job configuration files.
//!
//! TOML is the primary format; JSON is accepted by extension. Every knob
//! except two has a baked-in default matching the reference recipe: the
//! dataset path and the budget `epsilon` must be stated explicitly (the
//! budget is the one number a data owner must consciously choose).

use std::path::Path;

use serde::Deserialize;

use segue::distortion::DistortionConfig;
use segue::generator::GeneratorConfig;
use segue::trainer::TrainConfig;
use segue::util::io;
use segue::{Result, SegueError};

/// A fully resolved training job: what to train on, how to condition the
/// generator, and the trainer configuration.
#[derive(Debug, Clone)]
pub struct TrainJob {
    pub dataset: String,
    /// `labels` or `cluster:K`.
    pub side: String,
    pub train: TrainConfig,
}

/// On-disk schema. Unknown keys are rejected so typos surface as errors
/// naming the offending key instead of silently falling back to defaults.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainJobFile {
    dataset: Option<String>,
    side: Option<String>,
    epsilon: Option<f64>,
    epochs: Option<usize>,
    cycle_len: Option<usize>,
    lr_f: Option<f64>,
    lr_g: Option<f64>,
    alpha: Option<f64>,
    beta: Option<f64>,
    batch_size: Option<usize>,
    stop_loss: Option<f64>,
    seed: Option<u64>,
    surrogate_arch: Option<String>,
    surrogate_width: Option<usize>,
    distort_surrogate_stage: Option<bool>,
    zero_side: Option<bool>,
    generator: Option<GeneratorConfig>,
    distortion: Option<DistortionConfig>,
}

fn parse_job_text(text: &str, path: &Path) -> Result<TrainJobFile> {
    let is_json = path.extension().and_then(|e| e.to_str()) == Some("json");
    if is_json {
        serde_json::from_str(text).map_err(|e| SegueError::format(path, format!("{e}")))
    } else {
        toml::from_str(text).map_err(|e| SegueError::format(path, format!("{e}")))
    }
}

/// Load a training job file and fold it over the baked-in defaults.
///
/// `dataset_flag` and `seed_flag` are command-line overrides; the flag
/// wins over the file.
pub fn load_train_job(
    path: &Path,
    dataset_flag: Option<&str>,
    seed_flag: Option<u64>,
) -> Result<TrainJob> {
    let text = io::read_text(path)?;
    let file = parse_job_text(&text, path)?;

    let mut train = TrainConfig::default();
    train.epsilon = file.epsilon.ok_or_else(|| {
        SegueError::Config(format!(
            "missing required config key 'epsilon' in {} (the perturbation budget, e.g. 0.0314 for 8/255)",
            path.display()
        ))
    })?;
    let dataset = dataset_flag
        .map(str::to_string)
        .or(file.dataset)
        .ok_or_else(|| {
            SegueError::Config(format!(
                "missing required config key 'dataset' in {} (or pass --dataset)",
                path.display()
            ))
        })?;

    if let Some(v) = file.epochs {
        train.epochs = v;
    }
    if let Some(v) = file.cycle_len {
        train.cycle_len = v;
    }
    if let Some(v) = file.lr_f {
        train.lr_f = v;
    }
    if let Some(v) = file.lr_g {
        train.lr_g = v;
    }
    if let Some(v) = file.alpha {
        train.alpha = v;
    }
    if let Some(v) = file.beta {
        train.beta = v;
    }
    if let Some(v) = file.batch_size {
        train.batch_size = v;
    }
    if let Some(v) = file.stop_loss {
        train.stop_loss = v;
    }
    if let Some(v) = file.seed {
        train.seed = v;
    }
    if let Some(v) = file.surrogate_arch {
        train.surrogate_arch = v;
    }
    if let Some(v) = file.surrogate_width {
        train.surrogate_width = v;
    }
    if let Some(v) = file.distort_surrogate_stage {
        train.distort_surrogate_stage = v;
    }
    if let Some(v) = file.zero_side {
        train.zero_side = v;
    }
    if let Some(v) = file.generator {
        train.generator = v;
    }
    if let Some(v) = file.distortion {
        train.distortion = v;
    }
    if let Some(seed) = seed_flag {
        train.seed = seed;
    }

    let side = file.side.unwrap_or_else(|| "labels".to_string());
    segue::side_info::SideInfoSpec::parse(&side)?;

    Ok(TrainJob { dataset, side, train })
}

/// The reference configuration as a commented TOML template. Everything in
/// it matches the baked-in defaults; `dataset` is the only placeholder.
pub fn paper_defaults_toml() -> String {
    let d = TrainConfig::default();
    let g = d.generator;
    let dist = &d.distortion;
    format!(
        r#"# Reference training configuration. Every value below the required
# block restates a baked-in default; delete anything you do not want to
# pin. Paths resolve as given, then under SEGUE_DATA_DIR.

# --- required ---------------------------------------------------------
dataset = "path/to/manifest.json"
epsilon = {eps}                  # L-inf budget (8/255)

# --- conditioning -----------------------------------------------------
side = "labels"                  # or "cluster:K" for pseudo-labels

# --- two-stage schedule ----------------------------------------------
epochs = {epochs}
cycle_len = {cycle_len}          # epoch 1 of each cycle trains the surrogate
lr_f = {lr_f}
lr_g = {lr_g}
alpha = {alpha}                  # weight of the classification term
beta = {beta}                    # weight of the perturbation-norm term
batch_size = {batch_size}
stop_loss = {stop_loss}          # early stop on full-set surrogate loss
seed = {seed}
surrogate_arch = "{arch}"
surrogate_width = {width}        # 0 = architecture default
distort_surrogate_stage = {dss}

[generator]
widths = [{w0}, {w1}, {w2}]
label_bits = {bits}

[distortion]
rho_d = {rho_d}                  # adversarial-step budget inside training
adv_steps = {adv_steps}
blur_kernel = [{bk0}, {bk1}]
blur_sigma = {blur_sigma}
p_hflip = {p_hflip}
p_vflip = {p_vflip}
sharpness_factor = {sharp}

[distortion.enabled]
adversarial = {e_adv}
blur = {e_blur}
hflip = {e_h}
vflip = {e_v}
sharpness = {e_s}
"#,
        eps = d.epsilon,
        epochs = d.epochs,
        cycle_len = d.cycle_len,
        lr_f = d.lr_f,
        lr_g = d.lr_g,
        alpha = d.alpha,
        beta = d.beta,
        batch_size = d.batch_size,
        stop_loss = d.stop_loss,
        seed = d.seed,
        arch = d.surrogate_arch,
        width = d.surrogate_width,
        dss = d.distort_surrogate_stage,
        w0 = g.widths[0],
        w1 = g.widths[1],
        w2 = g.widths[2],
        bits = g.label_bits,
        rho_d = dist.rho_d,
        adv_steps = dist.adv_steps,
        bk0 = dist.blur_kernel.0,
        bk1 = dist.blur_kernel.1,
        blur_sigma = dist.blur_sigma,
        p_hflip = dist.p_hflip,
        p_vflip = dist.p_vflip,
        sharp = dist.sharpness_factor,
        e_adv = dist.enabled.adversarial,
        e_blur = dist.enabled.blur,
        e_h = dist.enabled.hflip,
        e_v = dist.enabled.vflip,
        e_s = dist.enabled.sharpness,
    )
}
