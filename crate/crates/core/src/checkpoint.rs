//! Checkpoint directories: a JSON manifest next to safetensors weight blobs
//! and the codebook blob. Directories are written under a temporary name and
//! renamed into place, so readers never observe a half-written checkpoint.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub const MANIFEST: &str = "manifest.json";
pub const FORMAT_VERSION: u32 = 1;

/// Builds a checkpoint in a sibling temporary directory, then replaces `dir`.
pub fn write_atomically(dir: &Path, fill: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    let parent = dir.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(parent)?;
    let name = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "checkpoint".into());
    let tmp = parent.join(format!(".{name}.tmp-{}", std::process::id()));
    if tmp.exists() {
        fs::remove_dir_all(&tmp)?;
    }
    fs::create_dir_all(&tmp)?;
    if let Err(e) = fill(&tmp) {
        let _ = fs::remove_dir_all(&tmp);
        return Err(e);
    }
    if dir.exists() {
        fs::remove_dir_all(dir)?;
    }
    fs::rename(&tmp, dir)?;
    Ok(())
}

pub fn write_manifest<T: Serialize>(dir: &Path, manifest: &T) -> Result<()> {
    fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(manifest)?)?;
    Ok(())
}

pub fn read_manifest<T: DeserializeOwned>(dir: &Path) -> Result<T> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| incompatible(dir, format!("cannot read manifest: {e}")))?;
    serde_json::from_str(&text).map_err(|e| incompatible(dir, format!("bad manifest: {e}")))
}

pub(crate) fn incompatible(dir: &Path, reason: impl Into<String>) -> Error {
    Error::IncompatibleCheckpoint {
        path: PathBuf::from(dir),
        reason: reason.into(),
    }
}

pub(crate) fn require_file(dir: &Path, name: &str) -> Result<PathBuf> {
    let p = dir.join(name);
    if p.exists() {
        Ok(p)
    } else {
        Err(incompatible(dir, format!("missing `{name}`")))
    }
}
