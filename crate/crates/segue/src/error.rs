//! Error type shared across the crate.
//!
//! Variants are grouped by how a front end should react: configuration
//! errors are user-fixable, numeric aborts indicate a diverged run, and I/O
//! errors carry the offending path.

use std::path::PathBuf;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, SegueError>;

/// All failure modes surfaced by the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum SegueError {
    /// Invalid or inconsistent configuration (bad hyperparameter, shape
    /// mismatch between declared and actual data, unknown architecture name).
    #[error("config error: {0}")]
    Config(String),

    /// A run aborted mid-flight: non-finite loss, empty batch, failed
    /// invariant that indicates a bug rather than bad input.
    #[error("runtime abort: {0}")]
    Runtime(String),

    /// Filesystem trouble, annotated with the path that caused it.
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed on-disk artifact (manifest, checkpoint, perturbation set).
    #[error("format error in {path}: {detail}")]
    Format { path: PathBuf, detail: String },
}

impl SegueError {
    /// Attach a path to a raw I/O error.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SegueError::Io { path: path.into(), source }
    }

    /// Shorthand for a format error.
    pub fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        SegueError::Format { path: path.into(), detail: detail.into() }
    }

    /// Process exit code used by the CLI: 2 for configuration errors,
    /// 3 for runtime aborts, 4 for I/O and format errors.
    pub fn exit_code(&self) -> i32 {
        match self {
            SegueError::Config(_) => 2,
            SegueError::Runtime(_) => 3,
            SegueError::Io { .. } | SegueError::Format { .. } => 4,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_map_by_category() {
        assert_eq!(SegueError::Config("x".into()).exit_code(), 2);
        assert_eq!(SegueError::Runtime("x".into()).exit_code(), 3);
        let io = SegueError::io("/tmp/x", std::io::Error::other("boom"));
        assert_eq!(io.exit_code(), 4);
        assert_eq!(SegueError::format("/tmp/x", "bad magic").exit_code(), 4);
    }
}
