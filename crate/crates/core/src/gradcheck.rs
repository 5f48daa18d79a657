//! Central finite-difference verification of analytic gradients.

use crate::autograd::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    /// Largest norm-wise relative error over all inputs.
    pub max_rel_error: f64,
    /// Number of perturbed scalars.
    pub evaluated: usize,
    /// Index of the input with the largest error.
    pub worst_input: usize,
    /// Gradient norm of that input.
    pub worst_norm: f64,
}

/// Compares `backward` against central differences of `f` for every input.
///
/// Relative error per input is `|analytic - numeric| / max(|analytic|, |numeric|, 1e-6)`
/// using Euclidean norms over the whole tensor. The floor keeps finite-difference
/// noise on near-zero gradients from dominating.
pub fn check<F>(inputs: &[Tensor], step: f64, f: F) -> GradCheck
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let loss = f(&mut g, &vars);
    let grads = g.backward(loss);

    let eval = |perturbed: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.constant(t.clone())).collect();
        let loss = f(&mut g, &vars);
        g.value(loss).item()
    };

    let mut worst: f64 = 0.0;
    let (mut worst_input, mut worst_norm) = (0, 0.0);
    let mut evaluated = 0;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads
            .get(*v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[i].rows(), inputs[i].cols()));
        let mut numeric = Tensor::zeros(inputs[i].rows(), inputs[i].cols());
        for j in 0..inputs[i].len() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + step;
            let plus = eval(&work);
            work[i].data_mut()[j] = orig - step;
            let minus = eval(&work);
            work[i].data_mut()[j] = orig;
            numeric.data_mut()[j] = (plus - minus) / (2.0 * step);
            evaluated += 1;
        }
        let diff: f64 = analytic
            .data()
            .iter()
            .zip(numeric.data())
            .map(|(a, n)| (a - n) * (a - n))
            .sum::<f64>()
            .sqrt();
        let scale = analytic.sq_norm().sqrt().max(numeric.sq_norm().sqrt()).max(1e-6);
        if diff / scale > worst {
            worst = diff / scale;
            worst_input = i;
            worst_norm = analytic.sq_norm().sqrt();
        }
    }
    GradCheck {
        max_rel_error: worst,
        evaluated,
        worst_input,
        worst_norm,
    }
}
