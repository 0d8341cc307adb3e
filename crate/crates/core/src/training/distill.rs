use alloc::format;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{fit, prepare, Checkpoint, DistillationCache, EpochLog, HeadReset, Objective, OptimConfig, Prepared};
use crate::corpus::Corpus;
use crate::losses::{
    ce_kd_mixture, ce_loss, ctc_kd_sequence, ctc_loss, joint_loss, kd_loss, total_loss, GridKind, LossHyperparams,
    PosteriorGrid,
};
use crate::metrics::ErAveraging;
use crate::model::{Bound, ModelParams};
use crate::numerics::{Graph, NodeId};
use crate::strategies::{SelectionLedger, Strategy, StrategyWeights, TeacherBatchStats};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRunConfig {
    pub strategy: Strategy,
    pub loss: LossHyperparams,
    pub optim: OptimConfig,
    /// Pooling of sentence errors into the per-teacher batch ER.
    pub averaging: ErAveraging,
    pub heads: HeadReset,
    pub seed: u64,
}

impl Default for TrainRunConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Weighted,
            loss: LossHyperparams::default(),
            optim: OptimConfig::default(),
            averaging: ErAveraging::TokenWeighted,
            heads: HeadReset::Both,
            seed: 0,
        }
    }
}

/// Multi-teacher distillation loss over a cached ensemble.
pub struct KdObjective<'a> {
    cache: &'a DistillationCache,
    strategy: Strategy,
    loss: LossHyperparams,
    averaging: ErAveraging,
    ledger: SelectionLedger,
    batch: Vec<usize>,
    weights: Option<StrategyWeights>,
}

impl<'a> KdObjective<'a> {
    pub fn new(cache: &'a DistillationCache, config: &TrainRunConfig) -> Result<Self> {
        config.loss.validate()?;
        cache.validate()?;
        Ok(Self {
            cache,
            strategy: config.strategy,
            loss: config.loss,
            averaging: config.averaging,
            ledger: SelectionLedger::new(cache.teachers),
            batch: Vec::new(),
            weights: None,
        })
    }

    pub fn ledger(&self) -> &SelectionLedger {
        &self.ledger
    }

    pub fn into_ledger(self) -> SelectionLedger {
        self.ledger
    }
}

impl Objective for KdObjective<'_> {
    fn begin_batch(&mut self, batch_index: u64, batch: &[usize]) -> Result<()> {
        let rows = batch
            .iter()
            .map(|&i| {
                self.cache
                    .entries
                    .get(i)
                    .ok_or_else(|| Error::CacheMiss(format!("training utterance #{i}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let table = (0..self.cache.teachers)
            .map(|m| rows.iter().map(|r| r[m].error).collect())
            .collect();
        let stats = TeacherBatchStats::new(table, self.averaging)?;
        let weights = StrategyWeights::compute(self.strategy, &stats)?;
        self.ledger.record(batch_index, &stats, &weights)?;
        self.batch = batch.to_vec();
        self.weights = Some(weights);
        Ok(())
    }

    fn utterance_loss(
        &mut self,
        graph: &mut Graph<f32>,
        bound: &Bound,
        utt: &Prepared,
        pos: usize,
        dropout: &mut ChaCha8Rng,
    ) -> Result<NodeId> {
        let weights = self
            .weights
            .as_ref()
            .ok_or_else(|| Error::InvalidConfig("utterance loss requested before begin_batch".into()))?;
        let row = self.cache.row(self.batch[pos], &utt.id)?;
        let alpha = self.loss.alpha;

        let enc = bound.encode(graph, &utt.frames, Some(dropout))?;
        let ctc_grid = bound.ctc_posteriors(graph, &enc)?;
        let dec_grid = bound.teacher_forced(graph, &enc, &utt.tokens)?;

        let teachers: Vec<(PosteriorGrid, f64)> = weights
            .frame_weights(pos)
            .into_iter()
            .map(|(m, w)| (PosteriorGrid::constant(graph, &row[m].grid, GridKind::DecoderStep), w))
            .collect();
        let ce_kd = ce_kd_mixture(graph, &dec_grid, &teachers)?;
        let hyps: Vec<(&[usize], f64)> = weights
            .sequence_weights()
            .into_iter()
            .map(|(m, w)| (row[m].hypothesis.tokens.as_slice(), w))
            .collect();
        let (ctc_kd, _skipped) = ctc_kd_sequence(graph, &ctc_grid, &hyps)?;
        let kd = kd_loss(graph, ce_kd, ctc_kd, alpha)?;

        let ce = ce_loss(graph, &dec_grid, &utt.tokens)?;
        let ctc = ctc_loss(graph, &ctc_grid, &utt.tokens)?;
        let supervised = joint_loss(graph, ce, ctc, alpha)?;
        total_loss(graph, kd, supervised, self.loss.beta)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistillOutcome {
    pub checkpoint: Checkpoint,
    pub ledger: SelectionLedger,
}

/// Trains `student` against the cached ensemble on the training split.
pub fn distill(
    student: ModelParams<f32>,
    cache: &DistillationCache,
    corpus: &Corpus,
    config: &TrainRunConfig,
    max_len: usize,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<DistillOutcome> {
    let train = prepare(&corpus.train);
    if cache.len() != train.len() {
        let missing = train.get(cache.len()).map_or_else(|| "<extra cache rows>".into(), |u| u.id.clone());
        return Err(Error::CacheMiss(missing));
    }
    for (i, u) in train.iter().enumerate() {
        cache.row(i, &u.id)?;
    }
    let valid = prepare(&corpus.valid);
    let mut objective = KdObjective::new(cache, config)?;
    let checkpoint = fit(student, &train, &valid, &config.optim, max_len, config.seed, &mut objective, on_epoch)?;
    Ok(DistillOutcome {
        checkpoint,
        ledger: objective.into_ledger(),
    })
}
