//! Run manifests: every command records what it ran and what it produced,
//! so a run directory is self-describing and reruns are comparable.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use segue::util::hash::{sha256_file, sha256_hex};
use segue::util::io;
use segue::{Result, SegueError};

/// The record written as `run_manifest.json` at the end of every command.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Full configuration snapshot, exactly as resolved for the run.
    pub config: serde_json::Value,
    pub seed: u64,
    /// Unix seconds; both zero in deterministic mode.
    pub started_unix: u64,
    pub finished_unix: u64,
    /// Digest over the config snapshot and the digests of all file inputs.
    pub input_hash: String,
    pub deterministic: bool,
    /// Paths of produced artifacts, relative to the run directory.
    pub artifacts: Vec<String>,
}

fn now_unix() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// Digest identifying a run's inputs: the resolved config snapshot plus
/// the content hash of every input file (dataset manifests, checkpoints).
pub fn input_digest(
    command: &str,
    config: &serde_json::Value,
    inputs: &[(&str, &Path)],
) -> Result<String> {
    let mut text = format!("{command}\n{config}\n");
    for (name, path) in inputs {
        let digest = sha256_file(path)?;
        text.push_str(&format!("{name}={digest}\n"));
    }
    Ok(sha256_hex(text.as_bytes()))
}

/// An open run: a directory plus the growing artifact list. Create it,
/// register artifacts as they are written, then `finish()` to seal the
/// manifest.
pub struct RunContext {
    pub dir: PathBuf,
    manifest: RunManifest,
}

impl RunContext {
    /// Create the run directory under `out_root`, named by start time and
    /// input hash — or by the hash alone in deterministic mode, so reruns
    /// land on identical paths.
    pub fn create(
        out_root: &Path,
        command: &str,
        config: serde_json::Value,
        seed: u64,
        input_hash: String,
        deterministic: bool,
    ) -> Result<RunContext> {
        let started_unix = if deterministic { 0 } else { now_unix() };
        let tag = &input_hash[..12];
        let name = if deterministic {
            format!("run-{tag}")
        } else {
            format!("{started_unix}-{tag}")
        };
        let dir = out_root.join(name);
        io::ensure_dir(&dir)?;
        Ok(RunContext {
            dir,
            manifest: RunManifest {
                command: command.to_string(),
                config,
                seed,
                started_unix,
                finished_unix: 0,
                input_hash,
                deterministic,
                artifacts: Vec::new(),
            },
        })
    }

    /// Register an artifact and return its absolute path.
    pub fn artifact(&mut self, rel: &str) -> PathBuf {
        self.manifest.artifacts.push(rel.to_string());
        self.dir.join(rel)
    }

    /// Write `run_manifest.json` and return its path.
    pub fn finish(mut self) -> Result<PathBuf> {
        self.manifest.finished_unix = if self.manifest.deterministic { 0 } else { now_unix() };
        self.manifest.artifacts.push("run_manifest.json".to_string());
        let json = serde_json::to_string_pretty(&self.manifest)
            .map_err(|e| SegueError::Runtime(format!("run manifest serialization: {e}")))?;
        let path = self.dir.join("run_manifest.json");
        io::write_atomic(&path, json.as_bytes())?;
        Ok(path)
    }
}

/// Resolve an input path: as given if it exists, else relative to
/// `SEGUE_DATA_DIR` when that is set.
pub fn resolve_input(path: &str) -> Result<PathBuf> {
    let direct = PathBuf::from(path);
    if direct.exists() {
        return Ok(direct);
    }
    if let Ok(root) = std::env::var("SEGUE_DATA_DIR") {
        let joined = Path::new(&root).join(path);
        if joined.exists() {
            return Ok(joined);
        }
        return Err(SegueError::Config(format!(
            "input '{path}' not found (also tried '{}')",
            joined.display()
        )));
    }
    Err(SegueError::Config(format!(
        "input '{path}' not found (set SEGUE_DATA_DIR to resolve relative dataset paths)"
    )))
}
