use std::path::Path;

use mtkd_core::training::DistillationCache;
use serde::{Deserialize, Serialize};

use super::{read_versioned, sha256_hex, write_bytes};
use crate::{Error, Result};

pub const CACHE_VERSION: &str = "mtkd-cache-v1";

/// Content address of a cache: the corpus and every teacher checkpoint.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheKey {
    pub corpus: String,
    pub teachers: Vec<String>,
    pub beam_width: usize,
}

impl CacheKey {
    pub fn digest(&self) -> String {
        let mut text = format!("{CACHE_VERSION}\ncorpus {}\nbeam {}\n", self.corpus, self.beam_width);
        for t in &self.teachers {
            text.push_str("teacher ");
            text.push_str(t);
            text.push('\n');
        }
        sha256_hex(text.as_bytes())
    }
}

pub fn cache_key(corpus_hash: &str, teacher_hashes: &[String], beam_width: usize) -> CacheKey {
    CacheKey {
        corpus: corpus_hash.into(),
        teachers: teacher_hashes.to_vec(),
        beam_width,
    }
}

#[derive(Serialize, Deserialize)]
struct CacheFile {
    format_version: String,
    key: CacheKey,
    cache: DistillationCache,
}

pub fn write_cache(cache: &DistillationCache, key: &CacheKey, path: &Path) -> Result<()> {
    cache.validate()?;
    let file = CacheFile {
        format_version: CACHE_VERSION.into(),
        key: key.clone(),
        cache: cache.clone(),
    };
    let mut bytes = serde_json::to_vec(&file).map_err(|e| Error::format(path, 0, e.to_string()))?;
    bytes.push(b'\n');
    write_bytes(path, &bytes)
}

/// Reads a cache and checks that it was built for `key`.
pub fn read_cache(path: &Path, key: &CacheKey) -> Result<DistillationCache> {
    let file: CacheFile = read_versioned(path, CACHE_VERSION)?;
    if file.key != *key {
        return Err(Error::format(path, 1, "cache was built from a different corpus or teacher set"));
    }
    file.cache.validate()?;
    Ok(file.cache)
}
