//! Cross-entropy and entropy, both on plain probability vectors and as
//! differentiable graph terms.
//!
//! Plain-vector forms clamp probabilities to `[1e-12, 1]` inside logarithms
//! and treat `0 * log 0` as `0`. Graph forms work from logits through
//! `log_softmax`, which is finite without clamping.

use crate::autograd::{Graph, Var};
use crate::tensor::Tensor;

pub const PROB_FLOOR: f64 = 1e-12;

fn safe_ln(p: f64) -> f64 {
    p.clamp(PROB_FLOOR, 1.0).ln()
}

/// `-sum_k target[k] * ln(pred[k])`.
pub fn cross_entropy(target: &[f64], pred: &[f64]) -> f64 {
    assert_eq!(target.len(), pred.len(), "distribution lengths differ");
    -target
        .iter()
        .zip(pred)
        .filter(|(t, _)| **t != 0.0)
        .map(|(t, p)| t * safe_ln(*p))
        .sum::<f64>()
}

/// `-sum_k p[k] * ln(p[k])`.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|x| **x != 0.0)
        .map(|x| x * safe_ln(*x))
        .sum::<f64>()
}

/// Sum over rows of `-logp[r, target[r]]`.
pub fn nll_sum(g: &mut Graph, logp: Var, targets: &[usize]) -> Var {
    let entries: Vec<(usize, usize)> = targets.iter().copied().enumerate().collect();
    let picked = g.pick(logp, &entries);
    let s = g.sum(picked);
    g.scale(s, -1.0)
}

/// Sum over rows of `-sum_k target[r, k] * logp[r, k]`.
pub fn soft_ce_sum(g: &mut Graph, logp: Var, target: Tensor) -> Var {
    let t = g.constant(target);
    let prod = g.mul(logp, t);
    let s = g.sum(prod);
    g.scale(s, -1.0)
}

/// Sum over rows of the entropy of `softmax(logits[r])`.
pub fn entropy_sum(g: &mut Graph, logits: Var) -> Var {
    let p = g.softmax_rows(logits);
    let logp = g.log_softmax_rows(logits);
    let prod = g.mul(p, logp);
    let s = g.sum(prod);
    g.scale(s, -1.0)
}
