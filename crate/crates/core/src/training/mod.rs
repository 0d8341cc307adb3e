//! Teacher training, student initialization, distillation runs and
//! evaluation. Everything is single-threaded and a pure function of its
//! inputs and seeds; callers parallelize across independent runs.

mod cache;
mod distill;

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use cache::{build_cache_entries, CacheEntry, DistillationCache};
pub use distill::{distill, DistillOutcome, KdObjective, TrainRunConfig};

use crate::corpus::{Corpus, Utterance};
use crate::losses::{ce_loss, ctc_loss, joint_loss, LossHyperparams};
use crate::metrics::{sentence_error, ErAveraging, ErrorRate};
use crate::model::{greedy_decode, Bound, CellKind, ModelConfig, ModelParams, CTC_B, CTC_W, DEC_OUT_B, DEC_OUT_W};
use crate::numerics::{Graph, NodeId, Tensor};
use crate::{Error, Result};

/// Seed of the named sub-stream `name` of `base` (FNV-1a over the name,
/// finished with SplitMix64).
pub fn substream_seed(base: u64, name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut z = base ^ h;
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub anneal_factor: f64,
    /// Minimum relative validation improvement that keeps the LR.
    pub anneal_threshold: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            lr: 0.1,
            momentum: 0.0,
            clip_norm: Some(5.0),
            anneal_factor: 0.5,
            anneal_threshold: 0.0025,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad(format!("epochs and batch_size must be >= 1, got {} and {}", self.epochs, self.batch_size));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.anneal_factor > 0.0 && self.anneal_factor <= 1.0) {
            return bad(format!("anneal factor must lie in (0, 1], got {}", self.anneal_factor));
        }
        if !(self.anneal_threshold >= 0.0) {
            return bad(format!("anneal threshold must be >= 0, got {}", self.anneal_threshold));
        }
        if self.clip_norm.is_some_and(|c| !(c > 0.0)) {
            return bad("clip norm must be positive".into());
        }
        Ok(())
    }
}

/// Validation-based annealing: the LR is multiplied by `factor` when the
/// latest ER improves on the best earlier ER by less than `threshold`
/// (relative).
pub fn anneal_lr(history: &[f64], lr: f64, factor: f64, threshold: f64) -> f64 {
    let Some((&latest, earlier)) = history.split_last() else {
        return lr;
    };
    let Some(best) = earlier.iter().copied().reduce(f64::min) else {
        return lr;
    };
    let improvement = if best > 0.0 { (best - latest) / best } else { 0.0 };
    if improvement < threshold {
        lr * factor
    } else {
        lr
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// 0 is the model before any update.
    pub epoch: usize,
    pub train_loss: Option<f64>,
    pub valid_er: f64,
    /// LR used during the epoch.
    pub lr: f64,
}

/// Position of a training RNG, enough to resume it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub word_pos: u128,
}

impl RngState {
    fn of(seed: u64, rng: &ChaCha8Rng) -> Self {
        Self {
            seed,
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// Best-validation parameters with the full training history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub params: ModelParams<f32>,
    /// RNG position at the end of training.
    pub rng: RngState,
    /// Epoch whose parameters are stored.
    pub epoch: usize,
    pub history: Vec<EpochLog>,
}

impl Checkpoint {
    pub fn best_valid_er(&self) -> f64 {
        self.history[self.epoch].valid_er
    }
}

/// An utterance with frames already cast to the training precision.
#[derive(Clone, Debug, PartialEq)]
pub struct Prepared {
    pub id: String,
    pub frames: Tensor<f32>,
    pub tokens: Vec<usize>,
}

pub fn prepare(utterances: &[Utterance]) -> Vec<Prepared> {
    utterances
        .iter()
        .map(|u| Prepared {
            id: u.id.clone(),
            frames: u.frames.cast(),
            tokens: u.tokens.clone(),
        })
        .collect()
}

/// Decoding length cap: twice the longest target in the corpus.
pub fn default_max_len(corpus: &Corpus) -> usize {
    2 * corpus.max_target_len().max(1)
}

/// Per-utterance training loss.
pub trait Objective {
    /// Called once per mini-batch with the training-split indices it holds,
    /// before any of its utterance losses.
    fn begin_batch(&mut self, batch_index: u64, batch: &[usize]) -> Result<()>;

    /// Loss of `utt`, the `pos`-th utterance of the current batch.
    fn utterance_loss(
        &mut self,
        graph: &mut Graph<f32>,
        bound: &Bound,
        utt: &Prepared,
        pos: usize,
        dropout: &mut ChaCha8Rng,
    ) -> Result<NodeId>;
}

/// The joint CTC-attention objective against ground truth.
pub struct Supervised {
    pub alpha: f64,
}

impl Objective for Supervised {
    fn begin_batch(&mut self, _: u64, _: &[usize]) -> Result<()> {
        Ok(())
    }

    fn utterance_loss(
        &mut self,
        graph: &mut Graph<f32>,
        bound: &Bound,
        utt: &Prepared,
        _: usize,
        dropout: &mut ChaCha8Rng,
    ) -> Result<NodeId> {
        supervised_loss(graph, bound, utt, self.alpha, Some(dropout))
    }
}

pub fn supervised_loss(
    graph: &mut Graph<f32>,
    bound: &Bound,
    utt: &Prepared,
    alpha: f64,
    dropout: Option<&mut ChaCha8Rng>,
) -> Result<NodeId> {
    let enc = bound.encode(graph, &utt.frames, dropout)?;
    let ctc_grid = bound.ctc_posteriors(graph, &enc)?;
    let dec_grid = bound.teacher_forced(graph, &enc, &utt.tokens)?;
    let ce = ce_loss(graph, &dec_grid, &utt.tokens)?;
    let ctc = ctc_loss(graph, &ctc_grid, &utt.tokens)?;
    joint_loss(graph, ce, ctc, alpha)
}

/// Mean loss and averaged gradients of one batch. Utterances are processed
/// in batch order, so the reduction order is fixed. Gradients follow the
/// parameter layout.
pub fn batch_gradients<O: Objective>(
    params: &ModelParams<f32>,
    train: &[Prepared],
    batch: &[usize],
    objective: &mut O,
    dropout: &mut ChaCha8Rng,
) -> Result<(f64, Vec<Vec<f32>>)> {
    let mut grads: Vec<Vec<f32>> = params.tensors.iter().map(|t| vec![0.0; t.value.len()]).collect();
    let mut total = 0.0f64;
    for (pos, &i) in batch.iter().enumerate() {
        let mut graph = Graph::new();
        let bound = Bound::new(&mut graph, params, true)?;
        let loss = objective.utterance_loss(&mut graph, &bound, &train[i], pos, dropout)?;
        total += f64::from(graph.scalar(loss));
        let g = graph.backward(loss)?;
        for (acc, node) in grads.iter_mut().zip(bound.param_nodes()) {
            if let Some(d) = g.get(*node) {
                acc.iter_mut().zip(d).for_each(|(a, b)| *a += b);
            }
        }
    }
    let inv = 1.0 / batch.len() as f32;
    grads.iter_mut().flatten().for_each(|g| *g *= inv);
    Ok((total / batch.len() as f64, grads))
}

/// Plain or momentum SGD with optional global-norm clipping.
struct Sgd {
    velocity: Vec<Vec<f32>>,
    momentum: f32,
    clip_norm: Option<f64>,
}

impl Sgd {
    fn new(params: &ModelParams<f32>, config: &OptimConfig) -> Self {
        Self {
            velocity: params.tensors.iter().map(|t| vec![0.0; t.value.len()]).collect(),
            momentum: config.momentum as f32,
            clip_norm: config.clip_norm,
        }
    }

    fn step(&mut self, params: &mut ModelParams<f32>, mut grads: Vec<Vec<f32>>, lr: f64) {
        if let Some(limit) = self.clip_norm {
            let norm = grads
                .iter()
                .flatten()
                .map(|g| f64::from(*g) * f64::from(*g))
                .sum::<f64>()
                .sqrt();
            if norm > limit {
                let s = (limit / norm) as f32;
                grads.iter_mut().flatten().for_each(|g| *g *= s);
            }
        }
        let lr = lr as f32;
        for ((t, g), v) in params.tensors.iter_mut().zip(&grads).zip(&mut self.velocity) {
            for ((p, &g), v) in t.value.data_mut().iter_mut().zip(g).zip(v.iter_mut()) {
                *v = self.momentum * *v + g;
                *p -= lr * *v;
            }
        }
    }
}

/// Corpus-level ER of greedy decoding over `utterances`.
pub fn validation_er(params: &ModelParams<f32>, utterances: &[Prepared], max_len: usize) -> Result<f64> {
    let errors = utterances
        .iter()
        .map(|u| {
            let hyp = greedy_decode(params, &u.frames, max_len)?;
            sentence_error(&u.tokens, &hyp.tokens)
        })
        .collect::<Result<Vec<_>>>()?;
    ErAveraging::TokenWeighted.pool(&errors)
}

/// Mini-batch SGD with seeded shuffling, per-epoch validation, LR
/// annealing and best-validation checkpointing. `on_epoch` sees every log
/// row as it is produced.
pub fn fit<O: Objective>(
    mut params: ModelParams<f32>,
    train: &[Prepared],
    valid: &[Prepared],
    optim: &OptimConfig,
    max_len: usize,
    seed: u64,
    objective: &mut O,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<Checkpoint> {
    optim.validate()?;
    params.validate()?;
    if train.is_empty() || valid.is_empty() {
        return Err(Error::EmptyReduction);
    }
    let shuffle_seed = substream_seed(seed, "shuffle");
    let dropout_seed = substream_seed(seed, "dropout");
    let mut order_rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
    let mut dropout = ChaCha8Rng::seed_from_u64(dropout_seed);
    let mut sgd = Sgd::new(&params, optim);
    let mut lr = optim.lr;

    let initial = EpochLog {
        epoch: 0,
        train_loss: None,
        valid_er: validation_er(&params, valid, max_len)?,
        lr,
    };
    on_epoch(&initial);
    let mut history = vec![initial];
    let mut best = (0usize, params.clone());
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut batch_index = 0u64;
    for epoch in 1..=optim.epochs {
        order.shuffle(&mut order_rng);
        let mut loss_sum = 0.0;
        for (b, batch) in order.chunks(optim.batch_size).enumerate() {
            objective.begin_batch(batch_index, batch)?;
            batch_index += 1;
            let (loss, grads) = match batch_gradients(&params, train, batch, objective, &mut dropout) {
                Err(Error::NanInGraph { .. }) => return Err(Error::Diverged { epoch, batch: b }),
                other => other?,
            };
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, batch: b });
            }
            loss_sum += loss * batch.len() as f64;
            sgd.step(&mut params, grads, lr);
        }
        let valid_er = validation_er(&params, valid, max_len)?;
        let row = EpochLog {
            epoch,
            train_loss: Some(loss_sum / train.len() as f64),
            valid_er,
            lr,
        };
        on_epoch(&row);
        history.push(row);
        if valid_er < history[best.0].valid_er {
            best = (epoch, params.clone());
        }
        let ers: Vec<f64> = history.iter().map(|h| h.valid_er).collect();
        lr = anneal_lr(&ers, lr, optim.anneal_factor, optim.anneal_threshold);
    }
    Ok(Checkpoint {
        params: best.1,
        rng: RngState::of(dropout_seed, &dropout),
        epoch: best.0,
        history,
    })
}

/// One member of the teacher ensemble.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherSpec {
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub alpha: f64,
}

/// The ten-member ensemble used by the experiments, strongest first:
/// (hidden size, encoder layers, cell, dropout, batch size, LR, epochs).
const DEFAULT_GRID: [(usize, usize, CellKind, f64, usize, f64, usize); 10] = [
    (48, 2, CellKind::Gru, 0.0, 8, 0.5, 15),
    (32, 1, CellKind::Gru, 0.0, 8, 0.5, 12),
    (32, 1, CellKind::Mgu, 0.1, 8, 0.5, 10),
    (24, 1, CellKind::Gru, 0.2, 16, 0.5, 8),
    (16, 1, CellKind::Mgu, 0.0, 16, 0.5, 8),
    (16, 1, CellKind::Gru, 0.3, 16, 0.3, 6),
    (12, 1, CellKind::Mgu, 0.0, 32, 0.3, 5),
    (8, 1, CellKind::Gru, 0.0, 32, 0.3, 5),
    (8, 1, CellKind::Mgu, 0.2, 32, 0.2, 4),
    (8, 1, CellKind::Gru, 0.4, 64, 0.2, 3),
];

/// Default teacher grid for a corpus; member `i` is seeded from the
/// `teacher-i` sub-stream of `seed`.
pub fn default_teacher_grid(corpus: &Corpus, seed: u64) -> Vec<TeacherSpec> {
    DEFAULT_GRID
        .iter()
        .enumerate()
        .map(|(i, &(hidden, layers, cell, dropout, batch_size, lr, epochs))| TeacherSpec {
            model: ModelConfig {
                enc_hidden: hidden,
                enc_layers: layers,
                dec_hidden: hidden,
                att_dim: (hidden / 2).max(4),
                cell,
                dropout,
                seed: substream_seed(seed, &format!("teacher-{i}")),
                ..ModelConfig::new(corpus.dim(), corpus.vocab.content_size())
            },
            optim: OptimConfig {
                epochs,
                batch_size,
                lr,
                ..OptimConfig::default()
            },
            alpha: LossHyperparams::default().alpha,
        })
        .collect()
}

/// Grid members must be pairwise distinct.
pub fn validate_grid(grid: &[TeacherSpec]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::TeacherCount { expected: 1, found: 0 });
    }
    for (i, a) in grid.iter().enumerate() {
        a.model.validate()?;
        a.optim.validate()?;
        if let Some(j) = grid[..i].iter().position(|b| b == a) {
            return Err(Error::InvalidConfig(format!("teacher grid entries {j} and {i} are identical")));
        }
    }
    Ok(())
}

/// Trains a teacher on the joint objective.
pub fn train_teacher(
    spec: &TeacherSpec,
    corpus: &Corpus,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<Checkpoint> {
    check_vocabulary(&spec.model, corpus)?;
    let params = ModelParams::init(&spec.model)?;
    let train = prepare(&corpus.train);
    let valid = prepare(&corpus.valid);
    fit(
        params,
        &train,
        &valid,
        &spec.optim,
        default_max_len(corpus),
        substream_seed(spec.model.seed, "train"),
        &mut Supervised { alpha: spec.alpha },
        on_epoch,
    )
}

pub fn check_vocabulary(model: &ModelConfig, corpus: &Corpus) -> Result<()> {
    if model.vocab_size != corpus.vocab.content_size() || model.input_dim != corpus.dim() {
        return Err(Error::VocabularyMismatch(format!(
            "model expects {} tokens over {}-dim frames, corpus has {} tokens over {}-dim frames",
            model.vocab_size,
            model.input_dim,
            corpus.vocab.content_size(),
            corpus.dim()
        )));
    }
    Ok(())
}

/// Index of the lowest validation ER; ties go to the lowest index.
pub fn select_student_teacher(valid_ers: &[f64]) -> Result<usize> {
    if valid_ers.is_empty() {
        return Err(Error::TeacherCount { expected: 1, found: 0 });
    }
    let mut best = 0;
    for (i, e) in valid_ers.iter().enumerate() {
        if *e < valid_ers[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Which output layers are redrawn when a student starts from a teacher.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadReset {
    /// Decoder output projection and CTC head.
    #[default]
    Both,
    DecoderOnly,
}

impl HeadReset {
    pub fn names(self) -> &'static [&'static str] {
        match self {
            HeadReset::Both => &[DEC_OUT_W, DEC_OUT_B, CTC_W, CTC_B],
            HeadReset::DecoderOnly => &[DEC_OUT_W, DEC_OUT_B],
        }
    }
}

/// Copies the teacher and redraws its output layers from `seed`.
pub fn init_student_from_teacher(
    teacher: &ModelParams<f32>,
    student_config: &ModelConfig,
    reset: HeadReset,
    seed: u64,
) -> Result<ModelParams<f32>> {
    let mut expected = teacher.config.clone();
    expected.seed = student_config.seed;
    if expected != *student_config {
        return Err(Error::InvalidConfig(
            "student configuration must equal the teacher configuration".into(),
        ));
    }
    teacher.validate()?;
    let mut student = teacher.clone();
    student.config = student_config.clone();
    student.reinitialize(reset.names(), seed)?;
    for (s, t) in student.tensors.iter().zip(&teacher.tensors) {
        let reset_here = reset.names().contains(&s.name.as_str());
        if !reset_here && s.value != t.value {
            return Err(Error::InvalidConfig(format!("tensor {} was not copied", s.name)));
        }
    }
    Ok(student)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SentenceReport {
    pub id: String,
    pub reference: Vec<usize>,
    pub hypothesis: Vec<usize>,
    pub error: ErrorRate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Token-weighted corpus ER.
    pub er: f64,
    pub sentences: Vec<SentenceReport>,
}

/// Greedy-decodes every utterance and scores it against its reference.
pub fn evaluate(params: &ModelParams<f32>, utterances: &[Utterance], max_len: usize) -> Result<EvalReport> {
    let sentences = prepare(utterances)
        .into_iter()
        .map(|u| {
            let hyp = greedy_decode(params, &u.frames, max_len)?;
            Ok(SentenceReport {
                error: sentence_error(&u.tokens, &hyp.tokens)?,
                id: u.id,
                reference: u.tokens,
                hypothesis: hyp.tokens,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let errors: Vec<ErrorRate> = sentences.iter().map(|s| s.error).collect();
    Ok(EvalReport {
        er: ErAveraging::TokenWeighted.pool(&errors)?,
        sentences,
    })
}
