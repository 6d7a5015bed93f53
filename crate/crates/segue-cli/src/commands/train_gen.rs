//! `segue train-gen`: run the two-stage training procedure and persist the
//! generator checkpoint plus its loss history.

use std::path::PathBuf;
use std::time::{SystemTime, UNIX_EPOCH};

use segue::core::load_dataset;
use segue::evaluation::{write_line_chart, Series};
use segue::generator::{save_checkpoint, CheckpointMeta};
use segue::side_info::{pseudo_labels, save_pseudo_report, FeatureExtractorConfig, SideInfoSpec};
use segue::trainer::{run_two_stage, write_loss_csv, TrainReport};
use segue::util::io;
use segue::util::rng::derive_seed;
use segue::{Result, SegueError};

use crate::config::TrainJob;
use crate::manifest::{input_digest, resolve_input, RunContext};

#[derive(Debug, clap::Args)]
pub struct TrainGenArgs {
    /// Training job file (TOML, or JSON by extension).
    #[arg(long)]
    pub config: PathBuf,
    /// Dataset manifest path; overrides the config file's `dataset`.
    #[arg(long)]
    pub dataset: Option<String>,
    /// Overrides the config file's `seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Directory to create the run under.
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
    /// Zero wall-clock fields and name the run directory by content hash
    /// only, so reruns are byte-identical (checkpoint creation time aside).
    #[arg(long)]
    pub deterministic: bool,
    /// Validate the configuration and describe the run without writing.
    #[arg(long)]
    pub dry_run: bool,
}

/// Resolve guide labels for a dataset per the side spec. Returns the guide
/// vector and, for the clustering path, the pseudo-label report to persist.
pub fn resolve_guide(
    dataset: &segue::core::Dataset,
    side: &str,
    seed: u64,
) -> Result<(Vec<u32>, Option<segue::side_info::PseudoLabelReport>)> {
    match SideInfoSpec::parse(side)? {
        SideInfoSpec::Labels => Ok((dataset.train.labels.clone(), None)),
        SideInfoSpec::Cluster { k } => {
            // The extractor trains on the test split: images from the same
            // distribution that are not being protected.
            let (guide, report) = pseudo_labels(
                &dataset.train,
                &dataset.test,
                dataset.num_classes,
                k,
                &FeatureExtractorConfig::default(),
                Some(&dataset.train.labels),
                derive_seed(seed, "side-info"),
            )?;
            Ok((guide, Some(report)))
        }
    }
}

pub fn run(args: &TrainGenArgs) -> Result<()> {
    let job: TrainJob =
        crate::config::load_train_job(&args.config, args.dataset.as_deref(), args.seed)?;
    job.train.validate()?;
    job.train.generator.validate()?;

    let dataset_path = resolve_input(&job.dataset)?;
    let config = serde_json::json!({
        "dataset": job.dataset,
        "side": job.side,
        "train": serde_json::to_value(&job.train)
            .map_err(|e| SegueError::Runtime(format!("config snapshot: {e}")))?,
    });

    if args.dry_run {
        let ds = load_dataset(&dataset_path)?;
        println!(
            "dry run: config valid; would train on '{}' ({} train / {} test images, {} classes) with side '{}'",
            ds.name,
            ds.train.len(),
            ds.test.len(),
            ds.num_classes,
            job.side
        );
        return Ok(());
    }

    let hash = input_digest("train-gen", &config, &[("dataset", &dataset_path)])?;
    let mut run = RunContext::create(
        &args.out,
        "train-gen",
        config,
        job.train.seed,
        hash,
        args.deterministic,
    )?;

    let dataset = load_dataset(&dataset_path)?;
    let (guide, pseudo) = resolve_guide(&dataset, &job.side, job.train.seed)?;
    if let Some(report) = &pseudo {
        let path = run.artifact("pseudo_labels.json");
        save_pseudo_report(report, &path)?;
        match report.accuracy_vs_truth {
            Some(acc) => println!(
                "pseudo-labels: k={}, inertia {:.3}, accuracy vs truth {:.3}",
                report.k, report.inertia, acc
            ),
            None => println!("pseudo-labels: k={}, inertia {:.3}", report.k, report.inertia),
        }
    }

    println!(
        "training on '{}': {} images, {} epochs (cycle {}), epsilon {:.5}",
        dataset.name,
        dataset.train.len(),
        job.train.epochs,
        job.train.cycle_len,
        job.train.epsilon
    );
    let (generator, _surrogate, mut report) = run_two_stage(&dataset, &guide, &job.train)?;
    if args.deterministic {
        report.wall_seconds = 0.0;
    }

    let created_unix = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let meta = CheckpointMeta {
        config: job.train.generator,
        epsilon: job.train.epsilon,
        dataset_id: dataset.name.clone(),
        epochs_run: report.epochs_run,
        final_loss_f: report.final_loss_f,
        final_loss_g: report.final_loss_g,
        seed: job.train.seed,
        created_unix,
    };
    let ckpt_path = run.artifact("checkpoint.sgck");
    save_checkpoint(&generator, &meta, &ckpt_path)?;

    let csv_path = run.artifact("loss.csv");
    write_loss_csv(&report.history, &csv_path)?;

    let report_path = run.artifact("train_report.json");
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| SegueError::Runtime(format!("train report serialization: {e}")))?;
    io::write_atomic(&report_path, json.as_bytes())?;

    let chart_path = run.artifact("loss_curves.png");
    write_loss_chart(&report, &chart_path)?;

    println!(
        "finished: {} epochs ({}), loss_f {:.4}, loss_g {:.4}",
        report.epochs_run,
        if report.stopped_early { "stopped early" } else { "full schedule" },
        report.final_loss_f,
        report.final_loss_g
    );
    println!("checkpoint: {}", ckpt_path.display());
    let run_manifest = run.finish()?;
    println!("run manifest: {}", run_manifest.display());
    Ok(())
}

fn write_loss_chart(report: &TrainReport, path: &std::path::Path) -> Result<()> {
    let epoch_loss: Vec<(f64, f64)> = report
        .history
        .iter()
        .map(|r| (r.epoch as f64, r.mean_loss))
        .collect();
    let full_set: Vec<(f64, f64)> = report
        .history
        .iter()
        .map(|r| (r.epoch as f64, r.full_set_surrogate_loss))
        .collect();
    write_line_chart(
        path,
        "two-stage training",
        "epoch",
        "loss",
        &[
            Series { label: "stage mean loss".into(), points: epoch_loss },
            Series { label: "full-set surrogate loss".into(), points: full_set },
        ],
    )
}
