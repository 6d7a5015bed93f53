//! End-to-end tests of the installed binary: each one drives the real
//! executable through `std::process::Command` in a scratch directory.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn segue(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_segue"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn assert_ok(out: &Output, what: &str) {
    assert!(
        out.status.success(),
        "{what} failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

/// The only run directory under `root/runs` that did not exist before.
fn new_run_dir(root: &Path, seen: &mut Vec<PathBuf>) -> PathBuf {
    let mut fresh: Vec<PathBuf> = fs::read_dir(root.join("runs"))
        .expect("runs dir exists")
        .map(|e| e.unwrap().path())
        .filter(|p| !seen.contains(p))
        .collect();
    assert_eq!(fresh.len(), 1, "expected exactly one new run dir, got {fresh:?}");
    let dir = fresh.pop().unwrap();
    seen.push(dir.clone());
    dir
}

#[test]
fn full_pipeline_runs_and_reruns_byte_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let mut seen = Vec::new();

    let out = segue(
        root,
        &[
            "make-fixture",
            "--classes",
            "3",
            "--train-per-class",
            "6",
            "--test-per-class",
            "3",
            "--size",
            "16",
            "--seed",
            "7",
            "--deterministic",
        ],
    );
    assert_ok(&out, "make-fixture");
    let fixture = new_run_dir(root, &mut seen);
    let dataset = fixture.join("manifest.json");
    assert!(dataset.is_file(), "dataset manifest written");
    assert!(fixture.join("run_manifest.json").is_file(), "run manifest written");

    let config = root.join("tiny.toml");
    fs::write(
        &config,
        format!(
            "dataset = \"{}\"\nepsilon = 0.0314\nepochs = 2\ncycle_len = 2\nbatch_size = 9\nseed = 5\n\n[generator]\nwidths = [4, 8, 8]\n",
            dataset.display()
        ),
    )
    .unwrap();
    let out = segue(root, &["train-gen", "--config", "tiny.toml", "--deterministic"]);
    assert_ok(&out, "train-gen");
    let train_run = new_run_dir(root, &mut seen);
    let ckpt = train_run.join("checkpoint.sgck");
    for name in ["checkpoint.sgck", "loss.csv", "train_report.json", "loss_curves.png"] {
        assert!(train_run.join(name).is_file(), "train-gen writes {name}");
    }

    let out = segue(
        root,
        &[
            "protect",
            "--gen",
            ckpt.to_str().unwrap(),
            "--dataset",
            dataset.to_str().unwrap(),
            "--side",
            "labels",
            "--deterministic",
        ],
    );
    assert_ok(&out, "protect");
    let protect_run = new_run_dir(root, &mut seen);
    let export = protect_run.join("unlearnable/manifest.json");
    assert!(export.is_file(), "protect exports a dataset manifest");

    let spec = root.join("spec.json");
    fs::write(
        &spec,
        format!(
            "{{\"train_ref\": \"{}\", \"clean_ref\": \"{}\", \"epochs\": 2, \"batch_size\": 9, \"seed\": 3}}",
            export.display(),
            dataset.display()
        ),
    )
    .unwrap();
    let out = segue(root, &["attack", "--spec", "spec.json", "--deterministic"]);
    assert_ok(&out, "attack");
    let attack_run = new_run_dir(root, &mut seen);
    for name in ["eval_report.json", "curves.csv", "curves.png", "run_manifest.json"] {
        assert!(attack_run.join(name).is_file(), "attack writes {name}");
    }

    // A deterministic rerun maps to the same run directory and reproduces
    // every artifact byte for byte.
    let before: Vec<(String, Vec<u8>)> = ["eval_report.json", "curves.csv", "curves.png", "run_manifest.json"]
        .iter()
        .map(|n| (n.to_string(), fs::read(attack_run.join(n)).unwrap()))
        .collect();
    let out = segue(root, &["attack", "--spec", "spec.json", "--deterministic"]);
    assert_ok(&out, "attack rerun");
    assert_eq!(
        fs::read_dir(root.join("runs")).unwrap().count(),
        seen.len(),
        "rerun reuses the hash-named run directory"
    );
    for (name, bytes) in &before {
        let after = fs::read(attack_run.join(name)).unwrap();
        assert_eq!(&after, bytes, "{name} is byte-identical across reruns");
    }
}

#[test]
fn missing_epsilon_fails_with_config_exit_code_naming_the_key() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    fs::write(root.join("bad.toml"), "dataset = \"x.json\"\nepochs = 2\n").unwrap();
    let out = segue(root, &["train-gen", "--config", "bad.toml"]);
    assert_eq!(out.status.code(), Some(2), "config errors exit with code 2");
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("epsilon"), "error names the missing key: {stderr}");
}

#[test]
fn unknown_bench_method_fails_listing_the_valid_ones() {
    let tmp = tempfile::tempdir().unwrap();
    let out = segue(tmp.path(), &["bench", "--dataset", "x.json", "--methods", "random,frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(
        stderr.contains("frobnicate") && stderr.contains("segue, ue, lsp, random"),
        "error lists valid methods: {stderr}"
    );
}

#[test]
fn dry_run_validates_without_writing_anything() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let out = segue(root, &["make-fixture", "--classes", "2", "--dry-run"]);
    assert_ok(&out, "make-fixture --dry-run");
    assert!(
        String::from_utf8_lossy(&out.stdout).contains("dry run"),
        "dry run announces itself"
    );
    assert!(!root.join("runs").exists(), "no run directory is created");
}

#[test]
fn defaults_prints_a_template_with_the_tunable_sections() {
    let tmp = tempfile::tempdir().unwrap();
    let out = segue(tmp.path(), &["defaults"]);
    assert_ok(&out, "defaults");
    let stdout = String::from_utf8_lossy(&out.stdout);
    for needle in ["epsilon", "[generator]", "[distortion]", "cycle_len"] {
        assert!(stdout.contains(needle), "template mentions {needle}");
    }
}
