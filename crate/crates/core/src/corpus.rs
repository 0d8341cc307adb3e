//! Synthetic transcription corpus with controllable homophone confusability.
//!
//! Every content token owns a prototype feature vector. An utterance is a
//! uniformly drawn token sequence; each token is rendered as a run of
//! noisy copies of its prototype. Tokens declared homophones share one
//! prototype, so their frames are drawn from the same distribution.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::numerics::Tensor;
use crate::{Error, Result};

/// Content tokens are `0..z`; the three reserved ids follow them.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub(crate) content: usize,
}

impl Vocabulary {
    pub fn new(content: usize) -> Result<Self> {
        if content < 2 {
            return Err(Error::InvalidSpec(format!(
                "need at least 2 content tokens, got {content}"
            )));
        }
        Ok(Self { content })
    }

    /// Number of content tokens `z`.
    pub fn content_size(&self) -> usize {
        self.content
    }

    pub fn tokens(&self) -> core::ops::Range<usize> {
        0..self.content
    }

    /// CTC blank; also the column index of blank in a CTC frame grid.
    pub fn blank(&self) -> usize {
        self.content
    }

    pub fn bos(&self) -> usize {
        self.content + 1
    }

    pub fn eos(&self) -> usize {
        self.content + 2
    }

    /// Column index of end-of-sequence in a decoder step grid.
    pub fn eos_column(&self) -> usize {
        self.content
    }

    /// Width of both posterior grid kinds: content plus one reserved column.
    pub fn grid_width(&self) -> usize {
        self.content + 1
    }

    pub fn check(&self, tokens: &[usize]) -> Result<()> {
        match tokens.iter().find(|&&t| t >= self.content) {
            Some(&token) => Err(Error::TokenOutOfVocab {
                token,
                size: self.content,
            }),
            None => Ok(()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub valid: usize,
    pub test: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|x| x.name() == s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationSpec {
    pub z: usize,
    pub dim: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub min_repeat: usize,
    pub max_repeat: usize,
    pub sigma: f64,
    pub homophones: Vec<(usize, usize)>,
    pub splits: SplitSizes,
    pub seed: u64,
}

impl Default for GenerationSpec {
    fn default() -> Self {
        Self {
            z: 12,
            dim: 20,
            min_len: 3,
            max_len: 10,
            min_repeat: 2,
            max_repeat: 5,
            sigma: 0.3,
            homophones: vec![(0, 1), (2, 3)],
            splits: SplitSizes {
                train: 2000,
                valid: 200,
                test: 200,
            },
            seed: 0,
        }
    }
}

impl GenerationSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        Vocabulary::new(self.z)?;
        if self.dim < 1 {
            return bad(format!("feature dimension must be >= 1, got {}", self.dim));
        }
        if self.min_len < 1 || self.min_len > self.max_len {
            return bad(format!("invalid length range {}..={}", self.min_len, self.max_len));
        }
        if self.min_repeat < 1 || self.min_repeat > self.max_repeat {
            return bad(format!(
                "invalid repeat range {}..={}",
                self.min_repeat, self.max_repeat
            ));
        }
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return bad(format!("noise sigma must be finite and >= 0, got {}", self.sigma));
        }
        let SplitSizes { train, valid, test } = self.splits;
        if train == 0 || valid == 0 || test == 0 {
            return bad(format!("empty split in {train}/{valid}/{test}"));
        }
        let mut seen = BTreeSet::new();
        for &(a, b) in &self.homophones {
            if a == b || a >= self.z || b >= self.z {
                return bad(format!("homophone pair ({a},{b}) must name two distinct content tokens"));
            }
            if !seen.insert(a) || !seen.insert(b) {
                return bad(format!("token in homophone pair ({a},{b}) already paired"));
            }
        }
        Ok(())
    }

    /// The homophone partner of `token`, if any.
    pub fn partner(&self, token: usize) -> Option<usize> {
        self.homophones.iter().find_map(|&(a, b)| match token {
            t if t == a => Some(b),
            t if t == b => Some(a),
            _ => None,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    pub id: String,
    /// `T_x x d` input frames.
    pub frames: Tensor<f64>,
    /// Content-token targets, length `T_y`.
    pub tokens: Vec<usize>,
    /// Frames emitted per token; sums to `T_x`.
    pub repeats: Vec<usize>,
}

impl Utterance {
    pub fn num_frames(&self) -> usize {
        self.frames.rows()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub vocab: Vocabulary,
    /// One row per content token; homophones share rows.
    pub prototypes: Tensor<f64>,
    pub spec: GenerationSpec,
    pub train: Vec<Utterance>,
    pub valid: Vec<Utterance>,
    pub test: Vec<Utterance>,
}

impl Corpus {
    pub fn split(&self, split: Split) -> &[Utterance] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    pub fn split_mut(&mut self, split: Split) -> &mut Vec<Utterance> {
        match split {
            Split::Train => &mut self.train,
            Split::Valid => &mut self.valid,
            Split::Test => &mut self.test,
        }
    }

    pub fn dim(&self) -> usize {
        self.spec.dim
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.valid.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn max_target_len(&self) -> usize {
        Split::ALL
            .iter()
            .flat_map(|&s| self.split(s))
            .map(|u| u.tokens.len())
            .max()
            .unwrap_or(0)
    }

    /// Checks every utterance against the vocabulary and shape invariants.
    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        if self.vocab.content_size() != self.spec.z {
            return Err(Error::VocabularyMismatch(format!(
                "vocabulary has {} tokens, spec says {}",
                self.vocab.content_size(),
                self.spec.z
            )));
        }
        if self.prototypes.shape() != (self.spec.z, self.spec.dim) {
            return Err(Error::InvalidSpec(format!(
                "prototype table is {:?}, expected {}x{}",
                self.prototypes.shape(),
                self.spec.z,
                self.spec.dim
            )));
        }
        let mut ids = BTreeSet::new();
        for split in Split::ALL {
            for u in self.split(split) {
                if !ids.insert(u.id.as_str()) {
                    return Err(Error::InvalidSpec(format!("duplicate utterance id {}", u.id)));
                }
                self.vocab.check(&u.tokens)?;
                if u.tokens.is_empty() {
                    return Err(Error::InvalidSpec(format!("utterance {} has no tokens", u.id)));
                }
                if u.frames.cols() != self.spec.dim {
                    return Err(Error::InvalidSpec(format!(
                        "utterance {} has {}-dim frames, expected {}",
                        u.id,
                        u.frames.cols(),
                        self.spec.dim
                    )));
                }
                if u.repeats.len() != u.tokens.len() || u.repeats.iter().sum::<usize>() != u.num_frames() {
                    return Err(Error::InvalidSpec(format!(
                        "utterance {} repeats do not cover its frames",
                        u.id
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Draws the corpus described by `spec`; a pure function of the spec.
pub fn generate_corpus(spec: &GenerationSpec) -> Result<Corpus> {
    spec.validate()?;
    let vocab = Vocabulary::new(spec.z)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut protos: Vec<Vec<f64>> = Vec::with_capacity(spec.z);
    for token in 0..spec.z {
        match spec.partner(token).filter(|&p| p < token) {
            Some(p) => {
                let shared = protos[p].clone();
                protos.push(shared);
            }
            None => protos.push((0..spec.dim).map(|_| rng.sample(StandardNormal)).collect()),
        }
    }
    let prototypes = Tensor::from_rows(&protos)?;

    let mut draw_split = |split: Split, count: usize| -> Vec<Utterance> {
        (0..count)
            .map(|i| {
                let len = rng.random_range(spec.min_len..=spec.max_len);
                let tokens: Vec<usize> = (0..len).map(|_| rng.random_range(0..spec.z)).collect();
                let repeats: Vec<usize> = (0..len)
                    .map(|_| rng.random_range(spec.min_repeat..=spec.max_repeat))
                    .collect();
                let total: usize = repeats.iter().sum();
                let mut data = Vec::with_capacity(total * spec.dim);
                for (&tok, &r) in tokens.iter().zip(&repeats) {
                    for _ in 0..r {
                        for &p in &protos[tok] {
                            let noise: f64 = rng.sample(StandardNormal);
                            data.push(p + spec.sigma * noise);
                        }
                    }
                }
                Utterance {
                    id: format!("{}-{:05}", split.name(), i),
                    frames: Tensor::from_vec(total, spec.dim, data).expect("frame count matches repeats"),
                    tokens,
                    repeats,
                }
            })
            .collect()
    };
    let train = draw_split(Split::Train, spec.splits.train);
    let valid = draw_split(Split::Valid, spec.splits.valid);
    let test = draw_split(Split::Test, spec.splits.test);

    Ok(Corpus {
        vocab,
        prototypes,
        spec: spec.clone(),
        train,
        valid,
        test,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub utterances: usize,
    pub per_split: [(Split, usize); 3],
    pub token_counts: Vec<usize>,
    pub total_tokens: usize,
    pub total_frames: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    pub min_tokens: usize,
    pub max_tokens: usize,
    /// Mean of per-utterance `T_x / T_y`.
    pub mean_frames_per_token: f64,
}

pub fn corpus_stats(corpus: &Corpus) -> Result<CorpusStats> {
    if corpus.is_empty() {
        return Err(Error::InvalidSpec("empty corpus".into()));
    }
    let mut token_counts = vec![0usize; corpus.vocab.content_size()];
    let (mut total_tokens, mut total_frames) = (0usize, 0usize);
    let (mut min_frames, mut max_frames) = (usize::MAX, 0usize);
    let (mut min_tokens, mut max_tokens) = (usize::MAX, 0usize);
    let mut ratio_sum = 0.0;
    for u in Split::ALL.iter().flat_map(|&s| corpus.split(s)) {
        for &t in &u.tokens {
            token_counts[t] += 1;
        }
        let (tx, ty) = (u.num_frames(), u.tokens.len());
        total_tokens += ty;
        total_frames += tx;
        min_frames = min_frames.min(tx);
        max_frames = max_frames.max(tx);
        min_tokens = min_tokens.min(ty);
        max_tokens = max_tokens.max(ty);
        ratio_sum += tx as f64 / ty as f64;
    }
    Ok(CorpusStats {
        utterances: corpus.len(),
        per_split: [
            (Split::Train, corpus.train.len()),
            (Split::Valid, corpus.valid.len()),
            (Split::Test, corpus.test.len()),
        ],
        token_counts,
        total_tokens,
        total_frames,
        min_frames,
        max_frames,
        min_tokens,
        max_tokens,
        mean_frames_per_token: ratio_sum / corpus.len() as f64,
    })
}
