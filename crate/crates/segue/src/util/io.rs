//! File-system helpers with path-annotated errors.

use std::path::Path;

use crate::{Result, SegueError};

/// Create a directory and all parents.
pub fn ensure_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| SegueError::io(path, e))
}

/// Write bytes, creating parent directories as needed. The write goes
/// through a temporary sibling and a rename so readers never observe a
/// half-written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            ensure_dir(parent)?;
        }
    }
    let tmp = path.with_extension("tmp-write");
    std::fs::write(&tmp, bytes).map_err(|e| SegueError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| SegueError::io(path, e))
}

/// Read a whole file.
pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| SegueError::io(path, e))
}

/// Read a file as UTF-8 text.
pub fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| SegueError::io(path, e))
}
