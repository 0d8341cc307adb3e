//! Edit distance and error rates over token sequences.

use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Unit-cost edit counts of a minimal alignment.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditOps {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
}

impl EditOps {
    pub fn distance(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }
}

/// One step of an alignment between a reference and a hypothesis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AlignStep<A> {
    Match(A),
    Substitute { reference: A, hypothesis: A },
    Insert(A),
    Delete(A),
}

fn distance_table<A: PartialEq>(reference: &[A], hypothesis: &[A]) -> Vec<Vec<usize>> {
    let (n, m) = (reference.len(), hypothesis.len());
    let mut d = vec![vec![0usize; m + 1]; n + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=m {
        d[0][j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = d[i - 1][j - 1] + usize::from(reference[i - 1] != hypothesis[j - 1]);
            d[i][j] = sub.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    d
}

/// Minimal unit-cost alignment. Among equal-cost alignments the backtrace
/// prefers match/substitution, then deletion, then insertion.
pub fn align<A: PartialEq + Copy>(reference: &[A], hypothesis: &[A]) -> Vec<AlignStep<A>> {
    let d = distance_table(reference, hypothesis);
    let (mut i, mut j) = (reference.len(), hypothesis.len());
    let mut steps = Vec::with_capacity(i.max(j));
    while i > 0 || j > 0 {
        if i > 0 && j > 0 {
            let same = reference[i - 1] == hypothesis[j - 1];
            if d[i][j] == d[i - 1][j - 1] + usize::from(!same) {
                steps.push(if same {
                    AlignStep::Match(reference[i - 1])
                } else {
                    AlignStep::Substitute {
                        reference: reference[i - 1],
                        hypothesis: hypothesis[j - 1],
                    }
                });
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && d[i][j] == d[i - 1][j] + 1 {
            steps.push(AlignStep::Delete(reference[i - 1]));
            i -= 1;
        } else {
            steps.push(AlignStep::Insert(hypothesis[j - 1]));
            j -= 1;
        }
    }
    steps.reverse();
    steps
}

pub fn edit_distance<A: PartialEq + Copy>(reference: &[A], hypothesis: &[A]) -> EditOps {
    align(reference, hypothesis)
        .into_iter()
        .fold(EditOps::default(), |mut ops, step| {
            match step {
                AlignStep::Match(_) => {}
                AlignStep::Substitute { .. } => ops.substitutions += 1,
                AlignStep::Insert(_) => ops.insertions += 1,
                AlignStep::Delete(_) => ops.deletions += 1,
            }
            ops
        })
}

/// An error rate kept as the exact fraction `errors / length`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorRate {
    pub errors: usize,
    pub length: usize,
}

impl ErrorRate {
    pub fn new(errors: usize, length: usize) -> Result<Self> {
        if length == 0 {
            return Err(Error::UndefinedEr);
        }
        Ok(Self { errors, length })
    }

    pub fn value(&self) -> f64 {
        self.errors as f64 / self.length as f64
    }

    /// Exact comparison by cross-multiplication.
    pub fn cmp_exact(&self, other: &Self) -> Ordering {
        (self.errors as u128 * other.length as u128).cmp(&(other.errors as u128 * self.length as u128))
    }
}

pub fn sentence_error<A: PartialEq + Copy>(reference: &[A], hypothesis: &[A]) -> Result<ErrorRate> {
    ErrorRate::new(edit_distance(reference, hypothesis).distance(), reference.len())
}

/// Edit distance over reference length; exceeds 1 for long hypotheses.
pub fn sentence_er<A: PartialEq + Copy>(reference: &[A], hypothesis: &[A]) -> Result<f64> {
    sentence_error(reference, hypothesis).map(|e| e.value())
}

/// How per-sentence errors are pooled into a mini-batch ER.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErAveraging {
    /// Σ distances / Σ reference lengths.
    #[default]
    TokenWeighted,
    /// Mean of sentence ERs.
    SentenceMean,
}

impl ErAveraging {
    pub fn pool(self, errors: &[ErrorRate]) -> Result<f64> {
        if errors.is_empty() {
            return Err(Error::UndefinedEr);
        }
        Ok(match self {
            ErAveraging::TokenWeighted => {
                let (e, l) = errors
                    .iter()
                    .fold((0usize, 0usize), |(e, l), r| (e + r.errors, l + r.length));
                e as f64 / l as f64
            }
            ErAveraging::SentenceMean => {
                errors.iter().map(ErrorRate::value).sum::<f64>() / errors.len() as f64
            }
        })
    }
}

/// Token-weighted corpus ER of a batch of pairs.
pub fn batch_er<A: PartialEq + Copy, R: AsRef<[A]>, H: AsRef<[A]>>(references: &[R], hypotheses: &[H]) -> Result<f64> {
    if references.len() != hypotheses.len() {
        return Err(Error::CountMismatch(references.len(), hypotheses.len()));
    }
    let errors = references
        .iter()
        .zip(hypotheses)
        .map(|(r, h)| sentence_error(r.as_ref(), h.as_ref()))
        .collect::<Result<Vec<_>>>()?;
    ErAveraging::TokenWeighted.pool(&errors)
}

/// Substitution errors split by whether the reference token has a
/// confusable partner and whether the partner was produced.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubstitutionTally {
    pub substitutions: usize,
    /// Substitutions whose reference token has a partner.
    pub with_partner: usize,
    /// Substitutions that produced the reference token's partner.
    pub to_partner: usize,
}

impl SubstitutionTally {
    pub fn add(&mut self, reference: &[usize], hypothesis: &[usize], partner: impl Fn(usize) -> Option<usize>) {
        for step in align(reference, hypothesis) {
            if let AlignStep::Substitute { reference, hypothesis } = step {
                self.substitutions += 1;
                if let Some(p) = partner(reference) {
                    self.with_partner += 1;
                    self.to_partner += usize::from(p == hypothesis);
                }
            }
        }
    }

    /// Share of substitutions expected to hit a partner if every wrong
    /// token among the `z - 1` alternatives were equally likely.
    pub fn uniform_rate(&self, z: usize) -> Option<f64> {
        (self.substitutions > 0 && z > 1).then(|| self.with_partner as f64 / self.substitutions as f64 / (z - 1) as f64)
    }

    pub fn observed_rate(&self) -> Option<f64> {
        (self.substitutions > 0).then(|| self.to_partner as f64 / self.substitutions as f64)
    }
}
