//! Supervised and distillation objectives over posterior grids.
//!
//! Grids are graph nodes holding row-wise log-probabilities. The last
//! column is the reserved symbol of the grid kind: blank for CTC frame
//! grids, end-of-sequence for decoder step grids.

mod ctc;

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;

use serde::{Deserialize, Serialize};

pub use ctc::{adjacent_repeats, ctc_forward_backward, is_feasible};

use crate::numerics::{Graph, NodeId, Real, Tensor};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridKind {
    /// `T_x` frames, content tokens plus blank.
    CtcFrame,
    /// `T_y + 1` teacher-forced decoder steps, content tokens plus eos.
    DecoderStep,
}

/// A per-step distribution grid living in a [`Graph`] as log-probabilities.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PosteriorGrid {
    pub log_probs: NodeId,
    pub kind: GridKind,
}

impl PosteriorGrid {
    pub fn new(log_probs: NodeId, kind: GridKind) -> Self {
        Self { log_probs, kind }
    }

    /// Places a frozen probability grid into `graph` as a constant.
    pub fn constant<T: Real>(graph: &mut Graph<T>, probs: &Tensor<T>, kind: GridKind) -> Self {
        let node = graph.constant(probs.map(T::ln));
        Self::new(node, kind)
    }

    pub fn shape<T: Real>(&self, graph: &Graph<T>) -> (usize, usize) {
        graph.value(self.log_probs).shape()
    }

    pub fn probs<T: Real>(&self, graph: &Graph<T>) -> Tensor<T> {
        graph.value(self.log_probs).map(T::exp)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossHyperparams {
    /// CE weight against CTC.
    pub alpha: f64,
    /// KD weight against supervised training.
    pub beta: f64,
    /// Beam width for single-teacher N-best sequence distillation.
    pub nbest: usize,
    pub normalize_nbest: bool,
}

impl Default for LossHyperparams {
    fn default() -> Self {
        Self {
            alpha: 0.7,
            beta: 1.0,
            nbest: 4,
            normalize_nbest: true,
        }
    }
}

impl LossHyperparams {
    pub fn validate(&self) -> Result<()> {
        check_unit("alpha", self.alpha)?;
        check_unit("beta", self.beta)?;
        if self.nbest == 0 {
            return Err(Error::InvalidConfig("nbest must be >= 1".into()));
        }
        Ok(())
    }
}

fn check_unit(name: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("{name} must lie in [0, 1], got {v}")))
    }
}

fn expect_kind<T: Real>(graph: &Graph<T>, grid: &PosteriorGrid, kind: GridKind, context: &'static str) -> Result<()> {
    if grid.kind != kind {
        let (r, c) = grid.shape(graph);
        return Err(Error::Shape {
            context,
            expected: format!("{kind:?} grid"),
            found: format!("{:?} grid of {r}x{c}", grid.kind),
        });
    }
    Ok(())
}

/// `-log p(target | frames)` summed over every blank-augmented alignment.
pub fn ctc_loss<T: Real>(graph: &mut Graph<T>, grid: &PosteriorGrid, target: &[usize]) -> Result<NodeId> {
    ctc_kd_sequence(graph, grid, &[(target, 1.0)]).map(|(node, _)| node)
}

/// `-Σ_t log p(y_t)` over the decoder steps, the final step scoring eos.
pub fn ce_loss<T: Real>(graph: &mut Graph<T>, grid: &PosteriorGrid, target: &[usize]) -> Result<NodeId> {
    expect_kind(graph, grid, GridKind::DecoderStep, "ce_loss")?;
    let (rows, width) = grid.shape(graph);
    if rows != target.len() + 1 {
        return Err(Error::Shape {
            context: "ce_loss",
            expected: format!("{} decoder steps", target.len() + 1),
            found: format!("{rows}"),
        });
    }
    let mut cols = target.to_vec();
    cols.push(width - 1);
    let picked = graph.pick(grid.log_probs, &cols)?;
    let total = graph.sum(picked);
    Ok(graph.scale(total, -T::one()))
}

/// `a·first + (1-a)·second` with `a ∈ [0, 1]`.
fn mix<T: Real>(graph: &mut Graph<T>, first: NodeId, second: NodeId, a: f64, name: &str) -> Result<NodeId> {
    check_unit(name, a)?;
    let x = graph.scale(first, T::of(a));
    let y = graph.scale(second, T::of(1.0 - a));
    graph.add(x, y)
}

/// Joint CTC-attention objective `α·CE + (1-α)·CTC`.
pub fn joint_loss<T: Real>(graph: &mut Graph<T>, ce: NodeId, ctc: NodeId, alpha: f64) -> Result<NodeId> {
    mix(graph, ce, ctc, alpha, "alpha")
}

/// `α·CE-KD + (1-α)·CTC-KD`.
pub fn kd_loss<T: Real>(graph: &mut Graph<T>, ce_kd: NodeId, ctc_kd: NodeId, alpha: f64) -> Result<NodeId> {
    mix(graph, ce_kd, ctc_kd, alpha, "alpha")
}

/// `β·KD + (1-β)·supervised`.
pub fn total_loss<T: Real>(graph: &mut Graph<T>, kd: NodeId, supervised: NodeId, beta: f64) -> Result<NodeId> {
    mix(graph, kd, supervised, beta, "beta")
}

/// Frame-level distillation: `weight · Σ_steps Σ_v -p_tea(v) log p_st(v)`.
pub fn ce_kd_frame<T: Real>(
    graph: &mut Graph<T>,
    student: &PosteriorGrid,
    teacher: &PosteriorGrid,
    weight: f64,
) -> Result<NodeId> {
    ce_kd_mixture(graph, student, &[(*teacher, weight)])
}

/// Top-k frame distillation: the mean of the K per-teacher CE-KD terms.
pub fn ce_kd_topk<T: Real>(graph: &mut Graph<T>, student: &PosteriorGrid, teachers: &[PosteriorGrid]) -> Result<NodeId> {
    if teachers.is_empty() {
        return Err(Error::InvalidConfig("top-k distillation needs K >= 1 teachers".into()));
    }
    let w = 1.0 / teachers.len() as f64;
    let weighted: Vec<_> = teachers.iter().map(|t| (*t, w)).collect();
    ce_kd_mixture(graph, student, &weighted)
}

/// `Σ_m w_m · ce_kd_frame(student, teacher_m, 1)`, evaluated through the
/// single mixed target `Σ_m w_m p_m` (the loss is linear in the teacher
/// distribution).
pub fn ce_kd_mixture<T: Real>(
    graph: &mut Graph<T>,
    student: &PosteriorGrid,
    teachers: &[(PosteriorGrid, f64)],
) -> Result<NodeId> {
    let shape = student.shape(graph);
    let mut target = vec![T::zero(); shape.0 * shape.1];
    for (teacher, weight) in teachers {
        if graph.requires_grad(teacher.log_probs) {
            return Err(Error::TeacherRequiresGrad);
        }
        if teacher.kind != student.kind || teacher.shape(graph) != shape {
            let (r, c) = teacher.shape(graph);
            return Err(Error::Shape {
                context: "ce_kd",
                expected: format!("{:?} grid of {}x{}", student.kind, shape.0, shape.1),
                found: format!("{:?} grid of {r}x{c}", teacher.kind),
            });
        }
        if !(*weight >= 0.0) {
            return Err(Error::InvalidConfig(format!("negative distillation weight {weight}")));
        }
        let w = T::of(*weight);
        for (acc, &lp) in target.iter_mut().zip(graph.value(teacher.log_probs).data()) {
            *acc += w * lp.exp();
        }
    }
    let target = graph.constant(Tensor::from_vec(shape.0, shape.1, target)?);
    let prod = graph.mul(student.log_probs, target)?;
    let total = graph.sum(prod);
    Ok(graph.scale(total, -T::one()))
}

/// Sequence-level distillation `Σ_i w_i · ctc_loss(student, ŷ_i)`.
///
/// Hypotheses too long for the student's frame count are skipped and their
/// weight is spread proportionally over the feasible ones. Returns the loss
/// node and the number of skipped hypotheses.
pub fn ctc_kd_sequence<T: Real>(
    graph: &mut Graph<T>,
    student: &PosteriorGrid,
    hypotheses: &[(&[usize], f64)],
) -> Result<(NodeId, usize)> {
    expect_kind(graph, student, GridKind::CtcFrame, "ctc_loss")?;
    let (frames, width) = student.shape(graph);
    let blank = width - 1;
    for (hyp, w) in hypotheses {
        if !(*w >= 0.0) {
            return Err(Error::InvalidConfig(format!("negative distillation weight {w}")));
        }
        if let Some(&token) = hyp.iter().find(|&&t| t >= blank) {
            return Err(Error::TokenOutOfVocab { token, size: blank });
        }
    }

    // Merge duplicate hypotheses, keeping first-occurrence order.
    let mut merged: Vec<(&[usize], f64)> = Vec::with_capacity(hypotheses.len());
    let mut skipped = 0;
    for &(hyp, w) in hypotheses {
        if !is_feasible(frames, hyp) {
            skipped += 1;
            continue;
        }
        match merged.iter_mut().find(|(h, _)| *h == hyp) {
            Some(entry) => entry.1 += w,
            None => merged.push((hyp, w)),
        }
    }
    if merged.is_empty() {
        if hypotheses.len() == 1 {
            let hyp = hypotheses[0].0;
            return Err(Error::NoValidAlignment {
                frames,
                target_len: hyp.len(),
                repeats: adjacent_repeats(hyp),
            });
        }
        return Err(Error::AllHypothesesInfeasible { frames });
    }
    let total_w: f64 = hypotheses.iter().map(|h| h.1).sum();
    let feasible_w: f64 = merged.iter().map(|h| h.1).sum();
    let rescale = if skipped > 0 && feasible_w > 0.0 {
        total_w / feasible_w
    } else {
        1.0
    };

    let log_probs: Vec<f64> = graph.value(student.log_probs).data().iter().map(|v| v.as_f64()).collect();
    let mut loss = 0.0f64;
    let mut grad = vec![0.0f64; log_probs.len()];
    for (hyp, w) in merged {
        let w = w * rescale;
        if w == 0.0 {
            continue;
        }
        let (l, g) = ctc_forward_backward(&log_probs, frames, width, hyp, blank)?;
        loss += w * l;
        grad.iter_mut().zip(&g).for_each(|(a, b)| *a += w * b);
    }
    let grad = grad.into_iter().map(T::of).collect();
    let node = graph.fused_scalar(student.log_probs, T::of(loss), grad, "ctc")?;
    Ok((node, skipped))
}

/// Sequence weights of a single teacher's N-best list from its log-scores.
pub fn nbest_weights(scores: &[f64], normalize: bool) -> Vec<f64> {
    let raw: Vec<f64> = scores.iter().map(|s| s.exp()).collect();
    if !normalize {
        return raw;
    }
    match crate::numerics::softmax(scores) {
        Ok(p) => p,
        Err(_) => raw,
    }
}
