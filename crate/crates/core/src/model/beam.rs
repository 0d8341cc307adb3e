use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Left-to-right token scorer driven by the decoders below.
pub trait StepScorer {
    type State: Clone;

    /// Column of eos in the step distributions; content tokens precede it.
    fn eos_column(&self) -> usize;

    fn start(&mut self) -> Result<Self::State>;

    /// Log-distribution over content tokens plus eos after consuming `prev`
    /// (`None` on the first step), and the state after the step.
    fn step(&mut self, state: &Self::State, prev: Option<usize>) -> Result<(Vec<f64>, Self::State)>;
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BeamConfig {
    pub width: usize,
    /// Maximum number of content tokens before eos is forced.
    pub max_len: usize,
    /// Rank finished hypotheses by log-probability per emitted step.
    pub length_normalize: bool,
}

impl BeamConfig {
    pub fn new(width: usize, max_len: usize) -> Self {
        Self {
            width,
            max_len,
            length_normalize: false,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.width == 0 || self.max_len == 0 {
            return Err(Error::InvalidConfig(format!(
                "beam width and max_len must be >= 1, got {} and {}",
                self.width, self.max_len
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    /// Content tokens, eos stripped.
    pub tokens: Vec<usize>,
    /// Sum of step log-probabilities including the eos step.
    pub log_prob: f64,
}

/// Hypotheses in decreasing rank order, no duplicates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NBestList(Vec<Hypothesis>);

impl NBestList {
    pub fn best(&self) -> &Hypothesis {
        &self.0[0]
    }

    pub fn hypotheses(&self) -> &[Hypothesis] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_vec(self) -> Vec<Hypothesis> {
        self.0
    }
}

/// Higher score first, then the lexicographically smaller token sequence.
fn rank(sa: f64, a: &[usize], sb: f64, b: &[usize]) -> Ordering {
    sb.partial_cmp(&sa).unwrap_or(Ordering::Equal).then_with(|| a.cmp(b))
}

fn checked_scores(lp: Vec<f64>, eos: usize) -> Result<Vec<f64>> {
    if lp.len() != eos + 1 {
        return Err(Error::Shape {
            context: "decoder step",
            expected: format!("{} columns", eos + 1),
            found: format!("{}", lp.len()),
        });
    }
    if lp.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
        return Err(Error::NonFinite("decoder step distribution"));
    }
    Ok(lp)
}

/// Beam search over `width` live prefixes. Every eos extension of a live
/// prefix is recorded as a finished hypothesis; the live set is the best
/// `width` content extensions. Eos is not allowed as the first token, and
/// only eos is allowed after `max_len` content tokens. Ties rank the
/// lexicographically smaller token sequence first.
pub fn beam_search_with<S: StepScorer>(scorer: &mut S, config: &BeamConfig) -> Result<NBestList> {
    config.validate()?;
    let eos = scorer.eos_column();
    let mut active: Vec<(Vec<usize>, f64, S::State)> = vec![(Vec::new(), 0.0, scorer.start()?)];
    let mut finished: Vec<(Vec<usize>, f64)> = Vec::new();
    while !active.is_empty() {
        let mut candidates: Vec<(Vec<usize>, f64, usize)> = Vec::new();
        let mut next_states = Vec::with_capacity(active.len());
        for (i, (tokens, score, state)) in active.iter().enumerate() {
            let (lp, next) = scorer.step(state, tokens.last().copied())?;
            let lp = checked_scores(lp, eos)?;
            next_states.push(next);
            if !tokens.is_empty() {
                finished.push((tokens.clone(), score + lp[eos]));
            }
            if tokens.len() < config.max_len {
                for (col, &l) in lp[..eos].iter().enumerate() {
                    let mut key = tokens.clone();
                    key.push(col);
                    candidates.push((key, score + l, i));
                }
            }
        }
        candidates.sort_by(|a, b| rank(a.1, &a.0, b.1, &b.0));
        candidates.truncate(config.width);
        active = candidates
            .into_iter()
            .map(|(key, score, i)| (key, score, next_states[i].clone()))
            .collect();

        // Log-probabilities never increase along a path, so once the
        // width-th finished score beats every live prefix nothing changes.
        if !config.length_normalize && finished.len() >= config.width {
            finished.sort_by(|a, b| rank(a.1, &a.0, b.1, &b.0));
            finished.truncate(config.width);
            let floor = finished[config.width - 1].1;
            if active.iter().all(|(_, s, _)| *s < floor) {
                break;
            }
        }
    }
    let mut ranked: Vec<(f64, Hypothesis)> = finished
        .into_iter()
        .map(|(tokens, log_prob)| {
            let key = if config.length_normalize {
                log_prob / (tokens.len() + 1) as f64
            } else {
                log_prob
            };
            (key, Hypothesis { tokens, log_prob })
        })
        .collect();
    ranked.sort_by(|a, b| rank(a.0, &a.1.tokens, b.0, &b.1.tokens));
    ranked.truncate(config.width);
    Ok(NBestList(ranked.into_iter().map(|(_, h)| h).collect()))
}

/// Width-one search: follows the most probable content token and returns
/// the best eos completion seen along that path.
pub fn greedy_with<S: StepScorer>(scorer: &mut S, max_len: usize) -> Result<Hypothesis> {
    BeamConfig::new(1, max_len).validate()?;
    let eos = scorer.eos_column();
    let mut state = scorer.start()?;
    let mut tokens = Vec::new();
    let mut score = 0.0;
    let mut best: Option<Hypothesis> = None;
    loop {
        let (lp, next) = scorer.step(&state, tokens.last().copied())?;
        let lp = checked_scores(lp, eos)?;
        if !tokens.is_empty() && best.as_ref().is_none_or(|b| score + lp[eos] > b.log_prob) {
            best = Some(Hypothesis {
                tokens: tokens.clone(),
                log_prob: score + lp[eos],
            });
        }
        if tokens.len() == max_len {
            break;
        }
        let mut arg = 0;
        for col in 1..eos {
            if lp[col] > lp[arg] {
                arg = col;
            }
        }
        score += lp[arg];
        if best.as_ref().is_some_and(|b| score < b.log_prob) {
            break;
        }
        tokens.push(arg);
        state = next;
    }
    best.ok_or(Error::NonFinite("decoder produced no finite hypothesis"))
}
