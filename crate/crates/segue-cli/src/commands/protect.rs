//! `segue protect`: apply a trained generator to a dataset and export the
//! unlearnable copy.

use std::path::PathBuf;

use segue::core::load_dataset;
use segue::generator::{load_checkpoint, protect_dataset, SideSource};
use segue::side_info::{pseudo_labels, save_pseudo_report, FeatureExtractorConfig, SideInfoSpec};
use segue::util::hash::sha256_file;
use segue::util::rng::derive_seed;
use segue::{Result, SegueError};

use crate::manifest::{input_digest, resolve_input, RunContext};

#[derive(Debug, clap::Args)]
pub struct ProtectArgs {
    /// Trained generator checkpoint.
    #[arg(long)]
    pub gen: PathBuf,
    /// Dataset manifest to protect.
    #[arg(long)]
    pub dataset: String,
    /// Guide source: `labels` or `cluster:K`.
    #[arg(long, default_value = "labels")]
    pub side: String,
    /// Directory to create the run under.
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
    /// Perturbation budget; defaults to the one the checkpoint was trained
    /// with.
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Proxy dataset manifest whose train split trains the cluster feature
    /// extractor; defaults to the protected dataset's test split.
    #[arg(long)]
    pub proxy: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Zero wall-clock fields and name the run directory by content hash
    /// only, so reruns are byte-identical.
    #[arg(long)]
    pub deterministic: bool,
    /// Validate the configuration and describe the run without writing.
    #[arg(long)]
    pub dry_run: bool,
}

pub fn run(args: &ProtectArgs) -> Result<()> {
    let side_spec = SideInfoSpec::parse(&args.side)?;
    let dataset_path = resolve_input(&args.dataset)?;
    let ckpt_path = resolve_input(args.gen.to_str().unwrap_or_default())?;

    let (generator, meta) = load_checkpoint(&ckpt_path)?;
    let epsilon = args.epsilon.unwrap_or(meta.epsilon);
    if epsilon <= 0.0 {
        return Err(SegueError::Config("epsilon must be positive".into()));
    }

    let config = serde_json::json!({
        "gen": args.gen.to_string_lossy(),
        "dataset": args.dataset,
        "side": args.side,
        "epsilon": epsilon,
        "proxy": args.proxy,
        "seed": args.seed,
    });

    if args.dry_run {
        let ds = load_dataset(&dataset_path)?;
        println!(
            "dry run: would protect '{}' ({} train images, {} classes) with checkpoint trained on '{}' at epsilon {:.5}",
            ds.name,
            ds.train.len(),
            ds.num_classes,
            meta.dataset_id,
            epsilon
        );
        return Ok(());
    }

    let mut inputs: Vec<(&str, &std::path::Path)> =
        vec![("dataset", &dataset_path), ("checkpoint", &ckpt_path)];
    let proxy_path = match &args.proxy {
        Some(p) => Some(resolve_input(p)?),
        None => None,
    };
    if let Some(p) = &proxy_path {
        inputs.push(("proxy", p));
    }
    let hash = input_digest("protect", &config, &inputs)?;
    let mut run =
        RunContext::create(&args.out, "protect", config, args.seed, hash, args.deterministic)?;

    let dataset = load_dataset(&dataset_path)?;
    let side = match side_spec {
        SideInfoSpec::Labels => SideSource::TrueLabels,
        SideInfoSpec::Cluster { k } => {
            // Extractor fodder: an explicit proxy dataset's train split, or
            // this dataset's own test split (disjoint from what we protect).
            let proxy_ds;
            let (proxy_batch, proxy_classes) = match &proxy_path {
                Some(p) => {
                    proxy_ds = load_dataset(p)?;
                    (&proxy_ds.train, proxy_ds.num_classes)
                }
                None => (&dataset.test, dataset.num_classes),
            };
            let (guide, report) = pseudo_labels(
                &dataset.train,
                proxy_batch,
                proxy_classes,
                k,
                &FeatureExtractorConfig::default(),
                Some(&dataset.train.labels),
                derive_seed(args.seed, "side-info"),
            )?;
            let path = run.artifact("pseudo_labels.json");
            save_pseudo_report(&report, &path)?;
            match report.accuracy_vs_truth {
                Some(acc) => println!(
                    "pseudo-labels: k={k}, inertia {:.3}, accuracy vs truth {acc:.3}",
                    report.inertia
                ),
                None => println!("pseudo-labels: k={k}, inertia {:.3}", report.inertia),
            }
            SideSource::PseudoLabels(guide)
        }
    };

    let checkpoint_id = sha256_file(&ckpt_path)?[..16].to_string();
    let export_dir = run.dir.join("unlearnable");
    let report = protect_dataset(&generator, &dataset, &side, epsilon, &checkpoint_id, &export_dir)?;
    super::make_fixture::register_dataset_artifacts(&mut run, &report.manifest_path, report.images);

    println!(
        "budget: max |delta| {:.6} pre-quantization ({:.3} of epsilon), {} levels max post-quantization",
        report.stats.max_delta_pre,
        report.stats.max_delta_pre / epsilon,
        report.stats.max_levels_post
    );
    println!("export manifest: {}", report.manifest_path.display());
    let run_manifest = run.finish()?;
    println!("run manifest: {}", run_manifest.display());
    Ok(())
}
