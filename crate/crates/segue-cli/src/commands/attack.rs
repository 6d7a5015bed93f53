//! `segue attack`: train an attacker model per an experiment spec and
//! write the evaluation report.

use std::path::{Path, PathBuf};

use segue::core::load_dataset;
use segue::evaluation::{
    train_attacker_on, write_curves_csv, write_line_chart, write_report, EvalReport,
    ExperimentSpec, Series,
};
use segue::util::io;
use segue::{Result, SegueError};

use crate::manifest::{input_digest, resolve_input, RunContext};

#[derive(Debug, clap::Args)]
pub struct AttackArgs {
    /// Experiment spec file (JSON, or TOML by extension).
    #[arg(long)]
    pub spec: PathBuf,
    /// Directory to create the run under.
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
    /// Zero wall-clock fields and name the run directory by content hash
    /// only, so reruns are byte-identical.
    #[arg(long)]
    pub deterministic: bool,
    /// Validate the spec and describe the run without writing.
    #[arg(long)]
    pub dry_run: bool,
}

pub fn load_spec(path: &Path) -> Result<ExperimentSpec> {
    let spec = load_spec_lenient(path)?;
    if spec.train_ref.is_empty() {
        return Err(SegueError::Config(format!(
            "spec {} must set train_ref to a dataset manifest",
            path.display()
        )));
    }
    Ok(spec)
}

/// Parse and validate a spec without requiring `train_ref`; `bench` fills
/// the dataset references per method.
pub fn load_spec_lenient(path: &Path) -> Result<ExperimentSpec> {
    let text = io::read_text(path)?;
    let is_toml = path.extension().and_then(|e| e.to_str()) == Some("toml");
    let spec: ExperimentSpec = if is_toml {
        toml::from_str(&text).map_err(|e| SegueError::format(path, format!("{e}")))?
    } else {
        serde_json::from_str(&text).map_err(|e| SegueError::format(path, format!("{e}")))?
    };
    spec.validate()?;
    Ok(spec)
}

pub fn run(args: &AttackArgs) -> Result<()> {
    let spec = load_spec(&args.spec)?;
    let train_path = resolve_input(&spec.train_ref)?;
    let clean_path = if spec.clean_ref.is_empty() || spec.clean_ref == spec.train_ref {
        None
    } else {
        Some(resolve_input(&spec.clean_ref)?)
    };

    if args.dry_run {
        let ds = load_dataset(&train_path)?;
        println!(
            "dry run: spec {} valid; would train '{}' for {} epochs on '{}' ({} train images)",
            spec.hash(),
            spec.arch,
            spec.epochs,
            ds.name,
            ds.train.len()
        );
        return Ok(());
    }

    let config = serde_json::to_value(&spec)
        .map_err(|e| SegueError::Runtime(format!("spec snapshot: {e}")))?;
    let mut inputs: Vec<(&str, &Path)> = vec![("train", &train_path)];
    if let Some(p) = &clean_path {
        inputs.push(("clean", p));
    }
    let hash = input_digest("attack", &config, &inputs)?;
    let mut run =
        RunContext::create(&args.out, "attack", config, spec.seed, hash, args.deterministic)?;

    let train_ds = load_dataset(&train_path)?;
    let clean_test = match &clean_path {
        Some(p) => load_dataset(p)?.test,
        None => train_ds.test.clone(),
    };

    let (_model, mut report) = train_attacker_on(&train_ds, &clean_test, &spec)?;
    if args.deterministic {
        report.wall_seconds = 0.0;
    }
    write_attack_artifacts(&mut run, &report)?;

    println!(
        "attacker '{}' on '{}': final clean-test accuracy {:.4} (best {:.4})",
        spec.arch, train_ds.name, report.final_accuracy, report.best_accuracy
    );
    let run_manifest = run.finish()?;
    println!("run manifest: {}", run_manifest.display());
    Ok(())
}

/// Write the report JSON, the curves CSV, and the learning-curve chart.
pub fn write_attack_artifacts(run: &mut RunContext, report: &EvalReport) -> Result<()> {
    let report_path = run.artifact("eval_report.json");
    write_report(report, &report_path)?;
    let csv_path = run.artifact("curves.csv");
    write_curves_csv(report, &csv_path)?;

    let chart_path = run.artifact("curves.png");
    let test_acc: Vec<(f64, f64)> = report
        .curves
        .iter()
        .map(|e| (e.epoch as f64, e.clean_test_accuracy))
        .collect();
    let train_acc: Vec<(f64, f64)> = report
        .curves
        .iter()
        .map(|e| (e.epoch as f64, e.train_accuracy))
        .collect();
    write_line_chart(
        &chart_path,
        "attacker training",
        "epoch",
        "accuracy",
        &[
            Series { label: "clean test".into(), points: test_acc },
            Series { label: "train (augmented)".into(), points: train_acc },
        ],
    )
}
