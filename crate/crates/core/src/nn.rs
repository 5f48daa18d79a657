//! Parameter storage, layer building blocks and the Adam optimizer.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::autograd::{Gradients, Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

/// Named parameter tensors of one model, in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        self.index.insert(name.clone(), self.tensors.len());
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Replaces every tensor from `other`, which must have identical names and shapes.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<(), String> {
        if self.names != other.names {
            return Err("parameter names differ".into());
        }
        for (name, (dst, src)) in self
            .names
            .iter()
            .zip(self.tensors.iter_mut().zip(&other.tensors))
        {
            if dst.shape() != src.shape() {
                return Err(format!(
                    "parameter {name}: shape {:?} != {:?}",
                    dst.shape(),
                    src.shape()
                ));
            }
            *dst = src.clone();
        }
        Ok(())
    }

    /// Replaces a single tensor by name, checking its shape.
    pub fn set_by_name(&mut self, name: &str, tensor: Tensor) -> Result<(), String> {
        let &i = self
            .index
            .get(name)
            .ok_or_else(|| format!("unknown parameter {name}"))?;
        if self.tensors[i].shape() != tensor.shape() {
            return Err(format!(
                "parameter {name}: shape {:?} != {:?}",
                self.tensors[i].shape(),
                tensor.shape()
            ));
        }
        self.tensors[i] = tensor;
        Ok(())
    }

    /// SHA-256 over names, shapes and the exact bit patterns of every value.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.iter() {
            h.update(name.as_bytes());
            h.update((t.rows() as u64).to_le_bytes());
            h.update((t.cols() as u64).to_le_bytes());
            for x in t.data() {
                h.update(x.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Puts every parameter on the tape, differentiable or constant.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    g.input(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        Bound { vars }
    }
}

/// The tape handles of a bound [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Wraps tape variables created elsewhere, one per parameter in store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn grads(&self, grads: &Gradients) -> Vec<Option<Tensor>> {
        self.vars.iter().map(|&v| grads.get(v).cloned()).collect()
    }
}

pub fn xavier(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    uniform(rng, fan_in, fan_out, limit)
}

pub fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, limit: f64) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-limit..limit))
        .collect();
    Tensor::from_vec(rows, cols, data)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        fan_in: usize,
        fan_out: usize,
    ) -> Self {
        Linear {
            weight: store.add(format!("{name}.weight"), xavier(rng, fan_in, fan_out)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(1, fan_out)),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        g.linear(x, p.var(self.weight), p.var(self.bias))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Embedding {
    pub table: ParamId,
}

impl Embedding {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        count: usize,
        dim: usize,
    ) -> Self {
        Embedding {
            table: store.add(format!("{name}.weight"), uniform(rng, count, dim, 0.1)),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, ids: &[usize]) -> Var {
        g.gather_rows(p.var(self.table), ids)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::filled(1, dim, 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(1, dim)),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        g.layer_norm(x, p.var(self.gamma), p.var(self.beta), 1e-5)
    }
}

/// One LSTM direction: input projection plus recurrent weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Lstm {
    pub input: Linear,
    pub recurrent: ParamId,
}

impl Lstm {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        input_dim: usize,
        hidden: usize,
    ) -> Self {
        let input = Linear::new(store, rng, &format!("{name}.wx"), input_dim, 4 * hidden);
        // forget-gate bias starts at 1
        let bias = store.get_mut(input.bias);
        for j in hidden..2 * hidden {
            bias.data_mut()[j] = 1.0;
        }
        let recurrent = store.add(format!("{name}.wh"), xavier(rng, hidden, 4 * hidden));
        Lstm { input, recurrent }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        x: Var,
        segs: &crate::tensor::Segments,
        reverse: bool,
    ) -> Var {
        let xw = self.input.forward(g, p, x);
        g.lstm(xw, p.var(self.recurrent), segs, reverse)
    }
}

/// Epoch budget and optimizer settings for one training loop.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainOpts {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

/// Index batches over `0..n` in an order drawn from `rng`.
pub fn shuffled_batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Adam with optional global-norm gradient clipping.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: Option<f64>,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(5.0),
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update. Parameters without a gradient are left untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>]) {
        assert_eq!(grads.len(), store.len(), "one gradient slot per parameter");
        if self.m.is_empty() {
            for (_, t) in store.iter() {
                self.m.push(Tensor::zeros(t.rows(), t.cols()));
                self.v.push(Tensor::zeros(t.rows(), t.cols()));
            }
        }
        let norm: f64 = grads
            .iter()
            .flatten()
            .map(Tensor::sq_norm)
            .sum::<f64>()
            .sqrt();
        let clip = match self.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, grad) in grads.iter().enumerate() {
            let Some(grad) = grad else { continue };
            let param = store.get_mut(ParamId(i));
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((p, &gr), mi), vi) in param
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let gr = gr * clip;
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gr;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gr * gr;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *p -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// Plain gradient descent, `p -= lr * g`.
pub fn sgd_step(store: &mut ParamStore, grads: &[Option<Tensor>], lr: f64) {
    for (i, grad) in grads.iter().enumerate() {
        if let Some(grad) = grad {
            for (p, gr) in store.get_mut(ParamId(i)).data_mut().iter_mut().zip(grad.data()) {
                *p -= lr * gr;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn digest_tracks_exact_bits() {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::from_vec(1, 2, vec![1.0, 2.0]));
        let d0 = s.digest();
        s.get_mut(id).data_mut()[0] = 1.0 + f64::EPSILON;
        assert_ne!(d0, s.digest());
        s.get_mut(id).data_mut()[0] = 1.0;
        assert_eq!(d0, s.digest());
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut s = ParamStore::new();
        let id = s.add("x", Tensor::from_vec(1, 2, vec![3.0, -2.0]));
        let mut opt = Adam::new(0.1);
        for _ in 0..500 {
            let mut g = Graph::new();
            let p = s.bind(&mut g, true);
            let sq = g.mul(p.var(id), p.var(id));
            let loss = g.sum(sq);
            let grads = g.backward(loss);
            opt.step(&mut s, &p.grads(&grads));
        }
        assert!(s.get(id).data().iter().all(|x| x.abs() < 1e-2));
    }

    #[test]
    fn frozen_binding_has_no_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = ParamStore::new();
        let lin = Linear::new(&mut s, &mut rng, "l", 2, 2);
        let mut g = Graph::new();
        let p = s.bind(&mut g, false);
        let x = g.input(Tensor::from_vec(1, 2, vec![1.0, 1.0]));
        let y = lin.forward(&mut g, &p, x);
        let loss = g.sum(y);
        let grads = g.backward(loss);
        assert!(p.grads(&grads).iter().all(Option::is_none));
        assert!(grads.get(x).is_some());
    }
}
