use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("empty reduction")]
    EmptyReduction,
    #[error("non-finite input in {0}")]
    NonFinite(&'static str),
    #[error("shape mismatch in {context}: expected {expected}, found {found}")]
    Shape {
        context: &'static str,
        expected: String,
        found: String,
    },
    #[error("backward root must be a 1x1 scalar, found {rows}x{cols}")]
    NotScalar { rows: usize, cols: usize },
    #[error("non-finite value at graph node {node} ({op})")]
    NanInGraph { node: usize, op: &'static str },
    #[error("no valid alignment: {frames} frames cannot emit target of length {target_len} with {repeats} adjacent repeats")]
    NoValidAlignment {
        frames: usize,
        target_len: usize,
        repeats: usize,
    },
    #[error("undefined ER: empty reference")]
    UndefinedEr,
    #[error("count mismatch: {0} references vs {1} hypotheses")]
    CountMismatch(usize, usize),
    #[error("invalid generation spec: {0}")]
    InvalidSpec(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("token id {token} outside vocabulary of {size} content tokens")]
    TokenOutOfVocab { token: usize, size: usize },
    #[error("teacher grids must be constants, found a differentiable teacher grid")]
    TeacherRequiresGrad,
    #[error("all distilled hypotheses are infeasible for {frames} frames")]
    AllHypothesesInfeasible { frames: usize },
    #[error("training diverged (non-finite loss) at epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize },
    #[error("distillation cache has no entry for utterance {0}")]
    CacheMiss(String),
    #[error("teacher count mismatch: expected {expected}, found {found}")]
    TeacherCount { expected: usize, found: usize },
    #[error("vocabulary mismatch: {0}")]
    VocabularyMismatch(String),
}
