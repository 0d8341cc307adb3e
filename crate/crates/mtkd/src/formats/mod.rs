//! Versioned on-disk records. Every writer is deterministic: identical
//! values produce identical bytes.

mod cache;
mod checkpoint;
mod corpus;
mod manifest;
mod reports;

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::{Error, Result};

pub use cache::{cache_key, read_cache, write_cache, CacheKey, CACHE_VERSION};
pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_VERSION};
pub use corpus::{read_corpus, write_corpus, CORPUS_VERSION};
pub use manifest::{ArtifactRef, CacheRecord, RunManifest, RunRecord, TeacherRecord, MANIFEST_FILE, RUN_VERSION};
pub use reports::{
    write_comparison, write_evaluation, write_homophones, write_selection, write_selection_counts, write_teacher_summary,
    write_train_log, write_weight_trace, ComparisonRow, HomophoneRow, SelectionCountRow, TeacherSummaryRow,
};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path).map_err(Error::io(path))?))
}

pub(crate) fn create_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => fs::create_dir_all(dir).map_err(Error::io(dir)),
        _ => Ok(()),
    }
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    create_parent(path)?;
    fs::write(path, bytes).map_err(Error::io(path))
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| Error::format(path, 0, e.to_string()))?;
    bytes.push(b'\n');
    write_bytes(path, &bytes)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    if !path.exists() {
        return Err(Error::Missing { what: "file", path: path.to_path_buf() });
    }
    let bytes = fs::read(path).map_err(Error::io(path))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::format(path, e.line(), e.to_string()))
}

/// Reads a JSON record after checking its `format_version`.
pub(crate) fn read_versioned<T: DeserializeOwned>(path: &Path, expected: &str) -> Result<T> {
    #[derive(serde::Deserialize)]
    struct Probe {
        format_version: Option<String>,
    }
    if !path.exists() {
        return Err(Error::Missing { what: "file", path: path.to_path_buf() });
    }
    let bytes = fs::read(path).map_err(Error::io(path))?;
    let probe: Probe = serde_json::from_slice(&bytes).map_err(|e| Error::format(path, e.line(), e.to_string()))?;
    check_version(path, 1, probe.format_version.as_deref().unwrap_or("<none>"), expected)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::format(path, e.line(), e.to_string()))
}

/// Rejects records whose `format_version` is not `expected`.
pub(crate) fn check_version(path: &Path, line: usize, found: &str, expected: &str) -> Result<()> {
    if found != expected {
        return Err(Error::format(
            path,
            line,
            format!("unsupported format version {found:?}, expected {expected:?}"),
        ));
    }
    Ok(())
}
