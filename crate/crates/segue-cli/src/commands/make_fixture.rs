//! `segue make-fixture`: synthesize the grating benchmark dataset.

use std::path::Path;

use segue::core::{synthesize_fixture, write_dataset, FixtureParams};
use segue::Result;

use crate::manifest::{input_digest, RunContext};

#[derive(Debug, clap::Args)]
pub struct MakeFixtureArgs {
    /// Directory to create the run under.
    #[arg(long, default_value = "runs")]
    pub out: std::path::PathBuf,
    /// Dataset name recorded in its manifest.
    #[arg(long, default_value = "fixture")]
    pub name: String,
    #[arg(long, default_value_t = 10)]
    pub classes: usize,
    #[arg(long, default_value_t = 200)]
    pub train_per_class: usize,
    #[arg(long, default_value_t = 50)]
    pub test_per_class: usize,
    /// Square image side in pixels.
    #[arg(long, default_value_t = 32)]
    pub size: usize,
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

pub fn run(args: &MakeFixtureArgs) -> Result<()> {
    let params = FixtureParams {
        classes: args.classes,
        train_per_class: args.train_per_class,
        test_per_class: args.test_per_class,
        size: args.size,
        ..Default::default()
    };
    let config = serde_json::json!({
        "name": args.name,
        "params": serde_json::to_value(&params).expect("fixture params serialize"),
        "seed": args.seed,
    });
    if args.dry_run {
        println!(
            "dry run: would synthesize '{}' ({} classes x {}+{} images at {}px) into {}",
            args.name,
            args.classes,
            args.train_per_class,
            args.test_per_class,
            args.size,
            args.out.display()
        );
        return Ok(());
    }

    let (train, test) = synthesize_fixture(&params, args.seed)?;
    let hash = input_digest("make-fixture", &config, &[])?;
    let mut run = RunContext::create(&args.out, "make-fixture", config, args.seed, hash, args.deterministic)?;
    let manifest_path = write_dataset(
        &run.dir.clone(),
        &args.name,
        args.classes,
        &train,
        &test,
        None,
        None,
    )?;
    register_dataset_artifacts(&mut run, &manifest_path, train.len() + test.len());
    let run_manifest = run.finish()?;
    println!("dataset manifest: {}", manifest_path.display());
    println!("run manifest:     {}", run_manifest.display());
    Ok(())
}

/// Register a dataset export in the run manifest: the manifest file stands
/// in for the image tree (one line per PNG would bloat the record).
pub fn register_dataset_artifacts(run: &mut RunContext, manifest_path: &Path, images: usize) {
    let rel = manifest_path
        .strip_prefix(&run.dir)
        .map(|p| p.to_string_lossy().into_owned())
        .unwrap_or_else(|_| manifest_path.to_string_lossy().into_owned());
    run.artifact(&rel);
    println!("wrote {images} images under {}", manifest_path.parent().unwrap_or(Path::new(".")).display());
}
