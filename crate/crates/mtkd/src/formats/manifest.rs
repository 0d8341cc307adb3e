use std::path::Path;

use mtkd_core::strategies::Strategy;
use serde::{Deserialize, Serialize};

use super::{check_version, read_json, write_json, CacheKey};
use crate::{Error, Result};

pub const RUN_VERSION: &str = "mtkd-run-v1";
pub const MANIFEST_FILE: &str = "manifest.json";

/// A file under the output directory with its content hash.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactRef {
    /// Relative to the output directory, `/`-separated.
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherRecord {
    pub id: usize,
    pub checkpoint: ArtifactRef,
    pub best_epoch: usize,
    pub valid_er: f64,
    pub test_er: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CacheRecord {
    pub file: ArtifactRef,
    pub key: CacheKey,
    pub digest: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub name: String,
    pub strategy: Strategy,
    pub seed: u64,
    pub alpha: f64,
    pub beta: f64,
    pub epochs: usize,
    /// Teacher the student was initialized from.
    pub student_of: usize,
    pub checkpoint: ArtifactRef,
    pub best_epoch: usize,
    pub valid_er: f64,
    pub test_er: f64,
}

/// The run record kept at the root of every output directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format_version: String,
    pub seed: u64,
    pub corpus: Option<ArtifactRef>,
    pub grid: Option<ArtifactRef>,
    pub teachers: Vec<TeacherRecord>,
    pub selected_teacher: Option<usize>,
    pub cache: Option<CacheRecord>,
    pub runs: Vec<RunRecord>,
}

impl RunManifest {
    pub fn new(seed: u64) -> Self {
        Self {
            format_version: RUN_VERSION.into(),
            seed,
            corpus: None,
            grid: None,
            teachers: Vec::new(),
            selected_teacher: None,
            cache: None,
            runs: Vec::new(),
        }
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        if !path.exists() {
            return Err(Error::Missing {
                what: "run record (run gen-corpus first)",
                path,
            });
        }
        let m: Self = read_json(&path)?;
        check_version(&path, 1, &m.format_version, RUN_VERSION)?;
        Ok(m)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join(MANIFEST_FILE), self)
    }

    /// Replaces the run with the same name or appends, keeping runs sorted
    /// by name.
    pub fn upsert_run(&mut self, run: RunRecord) {
        self.runs.retain(|r| r.name != run.name);
        self.runs.push(run);
        self.runs.sort_by(|a, b| a.name.cmp(&b.name));
    }

    pub fn upsert_teacher(&mut self, teacher: TeacherRecord) {
        self.teachers.retain(|t| t.id != teacher.id);
        self.teachers.push(teacher);
        self.teachers.sort_by_key(|t| t.id);
    }
}
