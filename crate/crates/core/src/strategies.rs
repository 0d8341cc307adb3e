//! Per-batch teacher weighting and per-sentence teacher selection.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::metrics::{ErAveraging, ErrorRate};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Average,
    Weighted,
    Top1,
    Topk,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::Average, Strategy::Weighted, Strategy::Top1, Strategy::Topk];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Average => "average",
            Strategy::Weighted => "weighted",
            Strategy::Top1 => "top1",
            Strategy::Topk => "topk",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown strategy {s:?}")))
    }
}

impl core::fmt::Display for Strategy {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.name())
    }
}

/// Per-teacher error statistics of one mini-batch.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherBatchStats {
    /// `sentences[m][b]`: teacher `m` on batch sentence `b`.
    sentences: Vec<Vec<ErrorRate>>,
    batch_er: Vec<f64>,
}

impl TeacherBatchStats {
    /// Builds the stats from an `M × B` table of sentence errors.
    pub fn new(sentences: Vec<Vec<ErrorRate>>, averaging: ErAveraging) -> Result<Self> {
        let b = sentences.first().map(Vec::len).ok_or(Error::TeacherCount { expected: 1, found: 0 })?;
        if b == 0 {
            return Err(Error::EmptyReduction);
        }
        if let Some(row) = sentences.iter().find(|r| r.len() != b) {
            return Err(Error::CountMismatch(b, row.len()));
        }
        let batch_er = sentences
            .iter()
            .map(|row| averaging.pool(row))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { sentences, batch_er })
    }

    pub fn teachers(&self) -> usize {
        self.sentences.len()
    }

    pub fn batch_size(&self) -> usize {
        self.sentences[0].len()
    }

    /// Unclamped batch ER per teacher, for reporting.
    pub fn raw_batch_er(&self) -> &[f64] {
        &self.batch_er
    }

    pub fn clamped_batch_er(&self) -> Vec<f64> {
        self.batch_er.iter().map(|e| e.clamp(0.0, 1.0)).collect()
    }

    /// The M sentence errors of batch sentence `b`.
    pub fn sentence_column(&self, b: usize) -> Vec<ErrorRate> {
        self.sentences.iter().map(|row| row[b]).collect()
    }
}

pub fn average_weights(teachers: usize) -> Result<Vec<f64>> {
    if teachers == 0 {
        return Err(Error::TeacherCount { expected: 1, found: 0 });
    }
    Ok(vec![1.0 / teachers as f64; teachers])
}

/// `softmax(1 - er_m)` with each ER clamped to `[0, 1]` first.
pub fn er_softmax_weights(ers: &[f64]) -> Result<Vec<f64>> {
    if ers.is_empty() {
        return Err(Error::TeacherCount { expected: 1, found: 0 });
    }
    if ers.iter().any(|e| e.is_nan()) {
        return Err(Error::NonFinite("teacher error rate"));
    }
    let scores: Vec<f64> = ers.iter().map(|e| 1.0 - e.clamp(0.0, 1.0)).collect();
    crate::numerics::softmax(&scores)
}

/// Argmin over one sentence's teacher ERs; ties go to the lowest index.
pub fn select_top1(ers: &[ErrorRate]) -> Result<usize> {
    let mut best = 0;
    for (m, e) in ers.iter().enumerate().skip(1) {
        if e.cmp_exact(&ers[best]) == Ordering::Less {
            best = m;
        }
    }
    if ers.is_empty() {
        return Err(Error::TeacherCount { expected: 1, found: 0 });
    }
    Ok(best)
}

/// Every teacher achieving the minimum ER, compared as exact fractions.
pub fn select_topk(ers: &[ErrorRate]) -> Result<Vec<usize>> {
    let best = ers[select_top1(ers)?];
    Ok((0..ers.len())
        .filter(|&m| ers[m].cmp_exact(&best) == Ordering::Equal)
        .collect())
}

/// Teacher weights of one mini-batch under a strategy.
#[derive(Clone, Debug, PartialEq)]
pub struct StrategyWeights {
    pub strategy: Strategy,
    /// Batch weights over all M teachers: `1/M` under Average, the ER
    /// softmax otherwise. Always used for sequence-level distillation.
    pub weights: Vec<f64>,
    /// Per-sentence teacher sets, present for Top-1 and Top-k.
    pub selections: Option<Vec<Vec<usize>>>,
}

impl StrategyWeights {
    pub fn compute(strategy: Strategy, stats: &TeacherBatchStats) -> Result<Self> {
        let m = stats.teachers();
        let weights = match strategy {
            Strategy::Average => average_weights(m)?,
            _ => er_softmax_weights(stats.raw_batch_er())?,
        };
        let selections = match strategy {
            Strategy::Average | Strategy::Weighted => None,
            Strategy::Top1 => Some(
                (0..stats.batch_size())
                    .map(|b| select_top1(&stats.sentence_column(b)).map(|i| vec![i]))
                    .collect::<Result<_>>()?,
            ),
            Strategy::Topk => Some(
                (0..stats.batch_size())
                    .map(|b| select_topk(&stats.sentence_column(b)))
                    .collect::<Result<_>>()?,
            ),
        };
        Ok(Self {
            strategy,
            weights,
            selections,
        })
    }

    /// `(teacher, weight)` pairs of the frame-level term for sentence `b`.
    pub fn frame_weights(&self, b: usize) -> Vec<(usize, f64)> {
        match &self.selections {
            None => self.weights.iter().copied().enumerate().collect(),
            Some(sets) => {
                let set = &sets[b];
                let w = 1.0 / set.len() as f64;
                set.iter().map(|&m| (m, w)).collect()
            }
        }
    }

    /// `(teacher, weight)` pairs of the sequence-level term.
    pub fn sequence_weights(&self) -> Vec<(usize, f64)> {
        self.weights.iter().copied().enumerate().collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionRow {
    pub teacher_id: usize,
    pub top1_count: u64,
    pub topk_count: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightTraceRow {
    pub batch_index: u64,
    pub weights: Vec<f64>,
}

/// Cumulative selection counts under both selection rules, plus the batch
/// weight trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionLedger {
    top1: Vec<u64>,
    topk: Vec<u64>,
    trace: Vec<WeightTraceRow>,
}

impl SelectionLedger {
    pub fn new(teachers: usize) -> Self {
        Self {
            top1: vec![0; teachers],
            topk: vec![0; teachers],
            trace: Vec::new(),
        }
    }

    pub fn teachers(&self) -> usize {
        self.top1.len()
    }

    /// Counts the Top-1 and Top-k selections of every sentence in the batch
    /// and appends the batch weights to the trace.
    pub fn record(&mut self, batch_index: u64, stats: &TeacherBatchStats, weights: &StrategyWeights) -> Result<()> {
        let m = self.teachers();
        for found in [stats.teachers(), weights.weights.len()] {
            if found != m {
                return Err(Error::TeacherCount { expected: m, found });
            }
        }
        for b in 0..stats.batch_size() {
            let column = stats.sentence_column(b);
            self.top1[select_top1(&column)?] += 1;
            for k in select_topk(&column)? {
                self.topk[k] += 1;
            }
        }
        self.trace.push(WeightTraceRow {
            batch_index,
            weights: weights.weights.clone(),
        });
        Ok(())
    }

    pub fn top1_counts(&self) -> &[u64] {
        &self.top1
    }

    pub fn topk_counts(&self) -> &[u64] {
        &self.topk
    }

    pub fn trace(&self) -> &[WeightTraceRow] {
        &self.trace
    }

    pub fn selection_report(&self) -> Vec<SelectionRow> {
        (0..self.teachers())
            .map(|m| SelectionRow {
                teacher_id: m,
                top1_count: self.top1[m],
                topk_count: self.topk[m],
            })
            .collect()
    }

    /// Header of the weight-trace table: `batch_index, w_1..w_M`.
    pub fn trace_header(&self) -> Vec<String> {
        let mut h = vec![String::from("batch_index")];
        h.extend((1..=self.teachers()).map(|m| format!("w_{m}")));
        h
    }
}
