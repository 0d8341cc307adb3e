use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::Prepared;
use crate::losses::GridKind;
use crate::metrics::{sentence_error, ErrorRate};
use crate::model::{beam_search, BeamConfig, Bound, Hypothesis, ModelParams};
use crate::numerics::{Graph, Tensor};
use crate::{Error, Result};

/// What a frozen teacher contributes for one utterance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub utt_id: String,
    pub teacher: usize,
    /// Best beam hypothesis with its sequence log-probability.
    pub hypothesis: Hypothesis,
    /// Sentence error of `hypothesis` against the reference.
    pub error: ErrorRate,
    /// Teacher-forced decoder probabilities, `(T_y + 1) x (z + 1)`.
    pub grid: Tensor<f32>,
}

/// Teacher outputs for every utterance of a split, indexed
/// `[utterance][teacher]` in split order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillationCache {
    pub teachers: usize,
    pub beam: BeamConfig,
    pub entries: Vec<Vec<CacheEntry>>,
}

impl DistillationCache {
    pub fn new(teachers: usize, beam: BeamConfig, entries: Vec<Vec<CacheEntry>>) -> Result<Self> {
        let cache = Self { teachers, beam, entries };
        cache.validate()?;
        Ok(cache)
    }

    pub fn validate(&self) -> Result<()> {
        if self.teachers == 0 {
            return Err(Error::TeacherCount { expected: 1, found: 0 });
        }
        for row in &self.entries {
            if row.len() != self.teachers {
                return Err(Error::TeacherCount {
                    expected: self.teachers,
                    found: row.len(),
                });
            }
            for (m, e) in row.iter().enumerate() {
                if e.teacher != m || e.utt_id != row[0].utt_id {
                    return Err(Error::InvalidConfig(format!(
                        "cache row for {} is out of order at teacher {m}",
                        row[0].utt_id
                    )));
                }
                let expected = (e.error.length + 1, e.grid.cols());
                if e.grid.rows() != expected.0 {
                    return Err(Error::Shape {
                        context: "cache grid",
                        expected: format!("{} decoder steps", expected.0),
                        found: format!("{}", e.grid.rows()),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// The M entries of the `index`-th utterance, which must be `id`.
    pub fn row(&self, index: usize, id: &str) -> Result<&[CacheEntry]> {
        match self.entries.get(index) {
            Some(row) if row[0].utt_id == id => Ok(row),
            _ => Err(Error::CacheMiss(id.into())),
        }
    }
}

/// One cache row: every teacher's beam 1-best, its error and the
/// teacher-forced grid for `utt`.
pub fn build_cache_entries(teachers: &[ModelParams<f32>], utt: &Prepared, beam: &BeamConfig) -> Result<Vec<CacheEntry>> {
    teachers
        .iter()
        .enumerate()
        .map(|(m, params)| {
            let best = beam_search(params, &utt.frames, beam)?.into_vec().swap_remove(0);
            let mut graph = Graph::new();
            let bound = Bound::new(&mut graph, params, false)?;
            let enc = bound.encode(&mut graph, &utt.frames, None)?;
            let grid = bound.teacher_forced(&mut graph, &enc, &utt.tokens)?;
            debug_assert_eq!(grid.kind, GridKind::DecoderStep);
            Ok(CacheEntry {
                utt_id: utt.id.clone(),
                teacher: m,
                error: sentence_error(&utt.tokens, &best.tokens)?,
                hypothesis: best,
                grid: grid.probs(&graph),
            })
        })
        .collect()
}
