use alloc::vec::Vec;

use super::{Graph, NodeId, Tensor};
use crate::{Error, Result};

pub const DEFAULT_STEP: f64 = 1e-5;

/// Compares reverse-mode gradients against central differences.
///
/// `loss` builds a scalar from the parameter nodes it is handed. Returns the
/// maximum over all coordinates of
/// `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
pub fn check_gradient<F>(loss: F, point: &[Tensor<f64>], step: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
{
    if !(step > 0.0) {
        return Err(Error::InvalidConfig(alloc::format!("gradient-check step must be positive, got {step}")));
    }
    let eval = |params: &[Tensor<f64>]| -> Result<(Graph<f64>, Vec<NodeId>, NodeId)> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = params.iter().map(|p| g.param(p.clone())).collect();
        let root = loss(&mut g, &ids)?;
        Ok((g, ids, root))
    };

    let (graph, ids, root) = eval(point)?;
    let grads = graph.backward(root)?;
    let mut worst = 0.0f64;
    let mut probe = point.to_vec();
    for (t, id) in ids.iter().enumerate() {
        let analytic = grads.get_or_zero(*id, point[t].len());
        for (c, &a) in analytic.iter().enumerate() {
            let orig = point[t].data()[c];
            probe[t].data_mut()[c] = orig + step;
            let plus = {
                let (g, _, r) = eval(&probe)?;
                g.scalar(r)
            };
            probe[t].data_mut()[c] = orig - step;
            let minus = {
                let (g, _, r) = eval(&probe)?;
                g.scalar(r)
            };
            probe[t].data_mut()[c] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite("gradient check perturbation"));
            }
            let numeric = (plus - minus) / (2.0 * step);
            let denom = 1.0f64.max(a.abs()).max(numeric.abs());
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}
