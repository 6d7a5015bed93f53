//! `segue bench`: run protection methods end-to-end on one dataset —
//! generate, export, attack — and tabulate accuracy and generation time.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use segue::baselines::{
    apply_perturbation_set, classwise_random, lsp_patches, ue_min_min, MinMinConfig,
};
use segue::core::{export_unlearnable, load_dataset, Dataset, UnlearnableProvenance};
use segue::evaluation::{time_method, train_attacker_on, ExperimentSpec, MethodTiming};
use segue::generator::{load_checkpoint, perturb_train_split, SideSource};
use segue::nn::build_classifier;
use segue::util::hash::sha256_file;
use segue::util::io;
use segue::util::rng::derive_seed;
use segue::{Result, SegueError};

use crate::manifest::{input_digest, resolve_input, RunContext};

#[derive(Debug, clap::Args)]
pub struct BenchArgs {
    /// Dataset manifest to protect and attack.
    #[arg(long)]
    pub dataset: String,
    /// Comma-separated methods to run, in table order.
    #[arg(long, default_value = "segue,ue,lsp,random")]
    pub methods: String,
    /// Trained generator checkpoint (needed for the segue method).
    #[arg(long)]
    pub gen: Option<PathBuf>,
    /// Directory to create the run under.
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
    /// Perturbation budget shared by every method.
    #[arg(long, default_value_t = 8.0 / 255.0)]
    pub epsilon: f64,
    /// Patch grid cell size for the lsp method.
    #[arg(long, default_value_t = 8)]
    pub patch_size: usize,
    /// Timing repetitions per method; the table reports the median.
    #[arg(long, default_value_t = 1)]
    pub timing_runs: usize,
    /// Accepted for interface stability; methods currently run serially.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Attack spec file overriding the default attacker; its dataset
    /// references are filled in per method.
    #[arg(long)]
    pub attack_spec: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Zero wall-clock fields (including generation timings) and name the
    /// run directory by content hash only, so reruns are byte-identical.
    #[arg(long)]
    pub deterministic: bool,
    /// Validate the configuration and describe the run without writing.
    #[arg(long)]
    pub dry_run: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Method {
    Segue,
    Ue,
    Lsp,
    Random,
}

impl Method {
    fn parse(s: &str) -> Result<Method> {
        match s {
            "segue" => Ok(Method::Segue),
            "ue" => Ok(Method::Ue),
            "lsp" => Ok(Method::Lsp),
            "random" => Ok(Method::Random),
            other => Err(SegueError::Config(format!(
                "unknown method '{other}' (valid: segue, ue, lsp, random)"
            ))),
        }
    }

    fn name(self) -> &'static str {
        match self {
            Method::Segue => "segue",
            Method::Ue => "ue",
            Method::Lsp => "lsp",
            Method::Random => "random",
        }
    }
}

fn parse_methods(s: &str) -> Result<Vec<Method>> {
    let methods: Vec<Method> = s
        .split(',')
        .map(str::trim)
        .filter(|m| !m.is_empty())
        .map(Method::parse)
        .collect::<Result<_>>()?;
    if methods.is_empty() {
        return Err(SegueError::Config("no methods given".into()));
    }
    Ok(methods)
}

struct BenchRow {
    method: &'static str,
    gen_seconds: f64,
    final_accuracy: f64,
    best_accuracy: f64,
}

pub fn run(args: &BenchArgs) -> Result<()> {
    let methods = parse_methods(&args.methods)?;
    if args.jobs == 0 {
        return Err(SegueError::Config("--jobs must be at least 1".into()));
    }
    if args.timing_runs == 0 {
        return Err(SegueError::Config("--timing-runs must be at least 1".into()));
    }
    if methods.contains(&Method::Segue) && args.gen.is_none() {
        return Err(SegueError::Config(
            "the segue method needs --gen pointing at a trained checkpoint".into(),
        ));
    }
    if args.epsilon <= 0.0 {
        return Err(SegueError::Config("epsilon must be positive".into()));
    }

    let dataset_path = resolve_input(&args.dataset)?;
    let base_spec = match &args.attack_spec {
        Some(p) => super::attack::load_spec_lenient(p)?,
        None => ExperimentSpec::default(),
    };

    let config = serde_json::json!({
        "dataset": args.dataset,
        "methods": methods.iter().map(|m| m.name()).collect::<Vec<_>>(),
        "gen": args.gen.as_ref().map(|p| p.to_string_lossy()),
        "epsilon": args.epsilon,
        "patch_size": args.patch_size,
        "timing_runs": args.timing_runs,
        "seed": args.seed,
        "attack": serde_json::to_value(&base_spec)
            .map_err(|e| SegueError::Runtime(format!("spec snapshot: {e}")))?,
    });

    if args.dry_run {
        let ds = load_dataset(&dataset_path)?;
        println!(
            "dry run: would bench {:?} on '{}' ({} train images) at epsilon {:.5}",
            methods.iter().map(|m| m.name()).collect::<Vec<_>>(),
            ds.name,
            ds.train.len(),
            args.epsilon
        );
        return Ok(());
    }

    let mut inputs: Vec<(&str, &Path)> = vec![("dataset", &dataset_path)];
    let ckpt_path = match &args.gen {
        Some(p) => Some(resolve_input(p.to_str().unwrap_or_default())?),
        None => None,
    };
    if let Some(p) = &ckpt_path {
        inputs.push(("checkpoint", p));
    }
    let hash = input_digest("bench", &config, &inputs)?;
    let mut run =
        RunContext::create(&args.out, "bench", config, args.seed, hash, args.deterministic)?;

    let dataset = load_dataset(&dataset_path)?;
    let mut rows = Vec::with_capacity(methods.len());
    for method in &methods {
        println!("[{}] generating...", method.name());
        let (timing, export_manifest) =
            generate_and_export(*method, &dataset, args, ckpt_path.as_deref(), &mut run)?;
        let gen_seconds = if args.deterministic { 0.0 } else { timing.median_seconds };
        println!("[{}] generation took {:.3}s (median of {})", method.name(), timing.median_seconds, timing.runs_seconds.len());

        println!("[{}] attacking...", method.name());
        let mut spec = base_spec.clone();
        spec.train_ref = export_manifest.to_string_lossy().into_owned();
        spec.clean_ref = dataset_path.to_string_lossy().into_owned();
        spec.seed = args.seed;
        let export_ds = load_dataset(&export_manifest)?;
        let (_model, mut report) = train_attacker_on(&export_ds, &dataset.test, &spec)?;
        if args.deterministic {
            report.wall_seconds = 0.0;
        }
        let report_rel = format!("{}/eval_report.json", method.name());
        let report_path = run.artifact(&report_rel);
        segue::evaluation::write_report(&report, &report_path)?;
        println!(
            "[{}] attacker final clean-test accuracy {:.4}",
            method.name(),
            report.final_accuracy
        );

        rows.push(BenchRow {
            method: method.name(),
            gen_seconds,
            final_accuracy: report.final_accuracy,
            best_accuracy: report.best_accuracy,
        });
    }

    let csv = render_csv(&rows);
    let table = render_table(&rows);
    let csv_path = run.artifact("bench.csv");
    io::write_atomic(&csv_path, csv.as_bytes())?;
    let txt_path = run.artifact("bench.txt");
    io::write_atomic(&txt_path, table.as_bytes())?;
    print!("{table}");
    let run_manifest = run.finish()?;
    println!("run manifest: {}", run_manifest.display());
    Ok(())
}

/// Produce one method's unlearnable export under the run directory.
/// Returns the generation timing (production only — no disk I/O in the
/// timed section) and the export's manifest path.
fn generate_and_export(
    method: Method,
    dataset: &Dataset,
    args: &BenchArgs,
    ckpt_path: Option<&Path>,
    run: &mut RunContext,
) -> Result<(MethodTiming, PathBuf)> {
    let out_dir = run.dir.join(method.name()).join("unlearnable");
    let seed = derive_seed(args.seed, method.name());
    let eps = args.epsilon;
    match method {
        Method::Segue => {
            let ckpt = ckpt_path.expect("checked by the caller");
            let (generator, _meta) = load_checkpoint(ckpt)?;
            let mut produced = None;
            let timing = time_method("segue", args.timing_runs, &mut || {
                produced =
                    Some(perturb_train_split(&generator, dataset, &SideSource::TrueLabels, eps)?);
                Ok(())
            })?;
            let (train_out, stats) = produced.expect("timed body ran");
            let provenance = UnlearnableProvenance {
                source_manifest: dataset.name.clone(),
                generator_checkpoint: sha256_file(ckpt)?[..16].to_string(),
                epsilon: eps,
                max_observed_delta: stats.max_delta_pre,
            };
            let manifest = export_unlearnable(
                dataset,
                &train_out,
                &stats.per_image_max_delta,
                provenance,
                &out_dir,
            )?;
            Ok((timing, manifest))
        }
        Method::Ue => {
            let mut produced = None;
            let timing = time_method("ue", args.timing_runs, &mut || {
                // The surrogate and its training are part of UE's cost.
                let mut f = build_classifier(
                    "cnn6",
                    dataset.num_classes,
                    0,
                    derive_seed(seed, "ue-surrogate"),
                )?;
                let cfg = MinMinConfig { epsilon: eps, seed, ..Default::default() };
                produced = Some(ue_min_min(dataset, f.as_mut(), &cfg)?);
                Ok(())
            })?;
            let (pset, report) = produced.expect("timed body ran");
            println!(
                "[ue] {} rounds, stopped early: {}",
                report.rounds_run, report.stopped_early
            );
            let protect = apply_perturbation_set(dataset, &pset, &out_dir)?;
            Ok((timing, protect.manifest_path))
        }
        Method::Lsp => {
            let mut produced = None;
            let timing = time_method("lsp", args.timing_runs, &mut || {
                produced = Some(lsp_patches(
                    dataset.num_classes,
                    dataset.image_size,
                    args.patch_size,
                    eps,
                    seed,
                )?);
                Ok(())
            })?;
            let pset = produced.expect("timed body ran");
            let protect = apply_perturbation_set(dataset, &pset, &out_dir)?;
            Ok((timing, protect.manifest_path))
        }
        Method::Random => {
            let mut produced = None;
            let timing = time_method("random", args.timing_runs, &mut || {
                produced =
                    Some(classwise_random(dataset.num_classes, dataset.image_size, eps, seed)?);
                Ok(())
            })?;
            let pset = produced.expect("timed body ran");
            let protect = apply_perturbation_set(dataset, &pset, &out_dir)?;
            Ok((timing, protect.manifest_path))
        }
    }
}

fn render_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from("method,gen_seconds,final_accuracy,best_accuracy\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            r.method, r.gen_seconds, r.final_accuracy, r.best_accuracy
        );
    }
    out
}

fn render_table(rows: &[BenchRow]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<8} {:>12} {:>10} {:>10}", "method", "gen_sec", "final_acc", "best_acc");
    for r in rows {
        let _ = writeln!(
            out,
            "{:<8} {:>12.3} {:>10.4} {:>10.4}",
            r.method, r.gen_seconds, r.final_accuracy, r.best_accuracy
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn method_parsing_rejects_unknown_names_listing_valid_ones() {
        let err = parse_methods("segue,tue").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("tue") && msg.contains("segue, ue, lsp, random"), "{msg}");
        assert!(parse_methods("").is_err());
        let ok = parse_methods("random, lsp").unwrap();
        assert_eq!(ok.len(), 2);
        assert_eq!(ok[0], Method::Random, "table order follows the flag order");
    }

    #[test]
    fn tables_render_stably() {
        let rows = vec![
            BenchRow { method: "segue", gen_seconds: 1.25, final_accuracy: 0.21, best_accuracy: 0.30 },
            BenchRow { method: "ue", gen_seconds: 100.0, final_accuracy: 0.28, best_accuracy: 0.33 },
        ];
        let csv = render_csv(&rows);
        assert!(csv.starts_with("method,gen_seconds,final_accuracy,best_accuracy\n"));
        assert_eq!(csv.lines().count(), 3);
        let table = render_table(&rows);
        assert!(table.lines().next().unwrap().contains("method"));
        assert!(table.contains("segue"));
    }
}
