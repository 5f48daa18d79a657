//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is built fresh for every forward pass. Leaves are either
//! constants or differentiable inputs; calling [`Graph::backward`] on a scalar
//! returns the gradient of every differentiable leaf.

pub mod kernels;

use crate::tensor::{gemm, matmul, Segments, Tensor};
use kernels::{AttentionCache, LstmCache};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Affine(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Recip(Var),
    Relu(Var),
    Gelu(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        rstd: Vec<f64>,
    },
    GatherRows(Var, Vec<usize>),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SegmentSoftmax(Var, Segments),
    SegmentWeightedSum(Var, Var, Segments),
    SegmentMax(Var, Vec<usize>),
    Unfold {
        x: Var,
        sources: Vec<Option<usize>>,
        width: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        segs: Segments,
        heads: usize,
        cache: AttentionCache,
    },
    Lstm {
        xw: Var,
        wh: Var,
        segs: Segments,
        reverse: bool,
        cache: LstmCache,
    },
    Pick(Var, Vec<(usize, usize)>),
    Sum(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients indexed by [`Var`]; only differentiable nodes carry one.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads[v.0].take()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is reported by [`Graph::backward`].
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = matmul(self.value(a), self.value(b));
        let rg = self.rg(&[a, b]);
        self.push(v, Op::MatMul(a, b), rg)
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "elementwise shape mismatch");
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::from_vec(x.rows(), x.cols(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_with(a, b, |p, q| p + q);
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_with(a, b, |p, q| p - q);
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_with(a, b, |p, q| p * q);
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Mul(a, b), rg)
    }

    /// Adds a `1 x c` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let (xv, rv) = (self.value(x), self.value(row));
        assert_eq!(rv.rows(), 1);
        assert_eq!(xv.cols(), rv.cols(), "add_row width mismatch");
        let mut out = xv.clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(rv.row(0)) {
                *o += *b;
            }
        }
        let rg = self.rg(&[x, row]);
        self.push(out, Op::AddRow(x, row), rg)
    }

    /// Scales row `i` of `x` by `s[i]` where `s` is `r x 1`.
    pub fn mul_col(&mut self, x: Var, s: Var) -> Var {
        let (xv, sv) = (self.value(x), self.value(s));
        assert_eq!(sv.shape(), (xv.rows(), 1), "mul_col shape mismatch");
        let mut out = xv.clone();
        for r in 0..out.rows() {
            let k = sv.get(r, 0);
            for o in out.row_mut(r) {
                *o *= k;
            }
        }
        let rg = self.rg(&[x, s]);
        self.push(out, Op::MulCol(x, s), rg)
    }

    /// `a * x + b` elementwise.
    pub fn affine(&mut self, x: Var, a: f64, b: f64) -> Var {
        let v = self.value(x).map(|t| a * t + b);
        let rg = self.rg(&[x]);
        self.push(v, Op::Affine(x, a), rg)
    }

    pub fn scale(&mut self, x: Var, a: f64) -> Var {
        self.affine(x, a, 0.0)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.value(x).map(f64::tanh);
        let rg = self.rg(&[x]);
        self.push(v, Op::Tanh(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|t| 1.0 / (1.0 + (-t).exp()));
        let rg = self.rg(&[x]);
        self.push(v, Op::Sigmoid(x), rg)
    }

    /// Elementwise reciprocal.
    pub fn recip(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|t| 1.0 / t);
        let rg = self.rg(&[x]);
        self.push(v, Op::Recip(x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|t| t.max(0.0));
        let rg = self.rg(&[x]);
        self.push(v, Op::Relu(x), rg)
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self
            .value(x)
            .map(|t| 0.5 * t * (1.0 + (GELU_C * (t + 0.044715 * t * t * t)).tanh()));
        let rg = self.rg(&[x]);
        self.push(v, Op::Gelu(x), rg)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let v = softmax_rows(self.value(x));
        let rg = self.rg(&[x]);
        self.push(v, Op::SoftmaxRows(x), rg)
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let v = log_softmax_rows(self.value(x));
        let rg = self.rg(&[x]);
        self.push(v, Op::LogSoftmaxRows(x), rg)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let mut xhat = Tensor::zeros(rows, cols);
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Tensor::zeros(rows, cols);
        let (gv, bv) = (self.value(gamma).row(0), self.value(beta).row(0));
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / cols as f64;
            let s = 1.0 / (var + eps).sqrt();
            rstd.push(s);
            for c in 0..cols {
                let h = (row[c] - mean) * s;
                xhat.set(r, c, h);
                out.set(r, c, h * gv[c] + bv[c]);
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        )
    }

    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Var {
        let xv = self.value(x);
        let mut out = Tensor::zeros(index.len(), xv.cols());
        for (k, &i) in index.iter().enumerate() {
            out.row_mut(k).copy_from_slice(xv.row(i));
        }
        let rg = self.rg(&[x]);
        self.push(out, Op::GatherRows(x, index.to_vec()), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.rows(), rows, "concat_cols row mismatch");
            for r in 0..rows {
                out.row_mut(r)[off..off + pv.cols()].copy_from_slice(pv.row(r));
            }
            off += pv.cols();
        }
        let rg = self.rg(parts);
        self.push(out, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.cols(), cols, "concat_rows column mismatch");
            data.extend_from_slice(pv.data());
        }
        let rows = data.len() / cols.max(1);
        let rg = self.rg(parts);
        self.push(
            Tensor::from_vec(rows, cols, data),
            Op::ConcatRows(parts.to_vec()),
            rg,
        )
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        assert!(start + len <= xv.cols(), "slice_cols out of range");
        let mut out = Tensor::zeros(xv.rows(), len);
        for r in 0..xv.rows() {
            out.row_mut(r).copy_from_slice(&xv.row(r)[start..start + len]);
        }
        let rg = self.rg(&[x]);
        self.push(out, Op::SliceCols(x, start), rg)
    }

    /// Softmax of an `r x 1` column within each segment.
    pub fn segment_softmax(&mut self, x: Var, segs: &Segments) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.shape(), (segs.total(), 1));
        let mut out = Tensor::zeros(segs.total(), 1);
        for &(start, len) in segs.spans() {
            let vals = &xv.data()[start..start + len];
            let max = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = vals.iter().map(|v| (v - max).exp()).sum();
            for (i, v) in vals.iter().enumerate() {
                out.data_mut()[start + i] = (v - max).exp() / z;
            }
        }
        let rg = self.rg(&[x]);
        self.push(out, Op::SegmentSoftmax(x, segs.clone()), rg)
    }

    /// Per-segment `sum_i w_i x_i`; `w` is `r x 1`. Output is `segments x c`.
    pub fn segment_weighted_sum(&mut self, x: Var, w: Var, segs: &Segments) -> Var {
        let (xv, wv) = (self.value(x), self.value(w));
        assert_eq!(xv.rows(), segs.total());
        assert_eq!(wv.shape(), (segs.total(), 1));
        let mut out = Tensor::zeros(segs.len(), xv.cols());
        for (b, &(start, len)) in segs.spans().iter().enumerate() {
            let orow = out.row_mut(b);
            for i in start..start + len {
                let k = wv.get(i, 0);
                for (o, &t) in orow.iter_mut().zip(xv.row(i)) {
                    *o += k * t;
                }
            }
        }
        let rg = self.rg(&[x, w]);
        self.push(out, Op::SegmentWeightedSum(x, w, segs.clone()), rg)
    }

    /// Column-wise maximum within each segment (max-over-time pooling).
    pub fn segment_max(&mut self, x: Var, segs: &Segments) -> Var {
        let xv = self.value(x);
        let cols = xv.cols();
        let mut out = Tensor::zeros(segs.len(), cols);
        let mut arg = vec![0usize; segs.len() * cols];
        for (b, &(start, len)) in segs.spans().iter().enumerate() {
            assert!(len > 0, "segment_max over an empty segment");
            for c in 0..cols {
                let mut best = start;
                for i in start + 1..start + len {
                    if xv.get(i, c) > xv.get(best, c) {
                        best = i;
                    }
                }
                arg[b * cols + c] = best;
                out.set(b, c, xv.get(best, c));
            }
        }
        let rg = self.rg(&[x]);
        self.push(out, Op::SegmentMax(x, arg), rg)
    }

    /// Sliding windows of `width` rows per segment, zero padded at the end
    /// when a segment is shorter than the window. Returns the unfolded matrix
    /// (`windows x width*c`) and the window segments.
    pub fn unfold(&mut self, x: Var, segs: &Segments, width: usize) -> (Var, Segments) {
        let xv = self.value(x);
        let cols = xv.cols();
        let mut sources = Vec::new();
        let mut lengths = Vec::with_capacity(segs.len());
        for &(start, len) in segs.spans() {
            let windows = if len >= width { len - width + 1 } else { 1 };
            lengths.push(windows);
            for j in 0..windows {
                for k in 0..width {
                    sources.push((j + k < len).then_some(start + j + k));
                }
            }
        }
        let rows = sources.len() / width;
        let mut out = Tensor::zeros(rows, width * cols);
        for (slot, src) in sources.iter().enumerate() {
            if let Some(s) = src {
                let (r, k) = (slot / width, slot % width);
                out.row_mut(r)[k * cols..(k + 1) * cols].copy_from_slice(xv.row(*s));
            }
        }
        let rg = self.rg(&[x]);
        let v = self.push(out, Op::Unfold { x, sources, width }, rg);
        (v, Segments::from_lengths(&lengths))
    }

    /// Multi-head scaled dot-product self-attention within each segment.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, segs: &Segments, heads: usize) -> Var {
        let (out, cache) =
            kernels::attention_forward(self.value(q), self.value(k), self.value(v), segs, heads);
        let rg = self.rg(&[q, k, v]);
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                segs: segs.clone(),
                heads,
                cache,
            },
            rg,
        )
    }

    /// One LSTM direction over every segment. `xw` holds the input projections
    /// (bias included), `wh` the `h x 4h` recurrent weights.
    pub fn lstm(&mut self, xw: Var, wh: Var, segs: &Segments, reverse: bool) -> Var {
        let (out, cache) = kernels::lstm_forward(self.value(xw), self.value(wh), segs, reverse);
        let rg = self.rg(&[xw, wh]);
        self.push(
            out,
            Op::Lstm {
                xw,
                wh,
                segs: segs.clone(),
                reverse,
                cache,
            },
            rg,
        )
    }

    /// Selects entries `(row, col)` into a `k x 1` column.
    pub fn pick(&mut self, x: Var, entries: &[(usize, usize)]) -> Var {
        let xv = self.value(x);
        let data = entries.iter().map(|&(r, c)| xv.get(r, c)).collect();
        let rg = self.rg(&[x]);
        self.push(Tensor::column(data), Op::Pick(x, entries.to_vec()), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// `x W + b` for a row-major input.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xw = self.matmul(x, w);
        self.add_row(xw, b)
    }

    /// Gradients of the scalar `loss` with respect to every differentiable node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let mut acc = |v: Var, delta: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(t) => t.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        };
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    let mut da = Tensor::zeros(av.rows(), av.cols());
                    gemm(1.0, g, false, bv, true, 0.0, &mut da);
                    acc(*a, da);
                }
                if self.requires_grad(*b) {
                    let mut db = Tensor::zeros(bv.rows(), bv.cols());
                    gemm(1.0, av, true, g, false, 0.0, &mut db);
                    acc(*b, db);
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|t| -t));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, zip(g, bv, |p, q| p * q));
                acc(*b, zip(g, av, |p, q| p * q));
            }
            Op::AddRow(x, row) => {
                acc(*x, g.clone());
                if self.requires_grad(*row) {
                    let mut db = Tensor::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (d, &t) in db.row_mut(0).iter_mut().zip(g.row(r)) {
                            *d += t;
                        }
                    }
                    acc(*row, db);
                }
            }
            Op::MulCol(x, s) => {
                let (xv, sv) = (self.value(*x), self.value(*s));
                if self.requires_grad(*x) {
                    let mut dx = g.clone();
                    for r in 0..dx.rows() {
                        let k = sv.get(r, 0);
                        for t in dx.row_mut(r) {
                            *t *= k;
                        }
                    }
                    acc(*x, dx);
                }
                if self.requires_grad(*s) {
                    let ds = (0..g.rows())
                        .map(|r| g.row(r).iter().zip(xv.row(r)).map(|(p, q)| p * q).sum())
                        .collect();
                    acc(*s, Tensor::column(ds));
                }
            }
            Op::Affine(x, a) => acc(*x, g.map(|t| a * t)),
            Op::Tanh(x) => acc(*x, zip(g, out, |p, y| p * (1.0 - y * y))),
            Op::Sigmoid(x) => acc(*x, zip(g, out, |p, y| p * y * (1.0 - y))),
            Op::Recip(x) => acc(*x, zip(g, out, |p, y| -p * y * y)),
            Op::Relu(x) => acc(*x, zip(g, self.value(*x), |p, t| if t > 0.0 { p } else { 0.0 })),
            Op::Gelu(x) => acc(
                *x,
                zip(g, self.value(*x), |p, t| {
                    let u = GELU_C * (t + 0.044715 * t * t * t);
                    let th = u.tanh();
                    let du = GELU_C * (1.0 + 3.0 * 0.044715 * t * t);
                    p * (0.5 * (1.0 + th) + 0.5 * t * (1.0 - th * th) * du)
                }),
            ),
            Op::SoftmaxRows(x) => {
                let mut dx = Tensor::zeros(g.rows(), g.cols());
                for r in 0..g.rows() {
                    let (gr, yr) = (g.row(r), out.row(r));
                    let dot: f64 = gr.iter().zip(yr).map(|(p, q)| p * q).sum();
                    for (c, d) in dx.row_mut(r).iter_mut().enumerate() {
                        *d = yr[c] * (gr[c] - dot);
                    }
                }
                acc(*x, dx);
            }
            Op::LogSoftmaxRows(x) => {
                let mut dx = Tensor::zeros(g.rows(), g.cols());
                for r in 0..g.rows() {
                    let (gr, yr) = (g.row(r), out.row(r));
                    let s: f64 = gr.iter().sum();
                    for (c, d) in dx.row_mut(r).iter_mut().enumerate() {
                        *d = gr[c] - yr[c].exp() * s;
                    }
                }
                acc(*x, dx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gv = self.value(*gamma).row(0);
                let cols = g.cols() as f64;
                if self.requires_grad(*x) {
                    let mut dx = Tensor::zeros(g.rows(), g.cols());
                    for r in 0..g.rows() {
                        let dxhat: Vec<f64> =
                            g.row(r).iter().zip(gv).map(|(p, q)| p * q).collect();
                        let m1 = dxhat.iter().sum::<f64>() / cols;
                        let m2 = dxhat.iter().zip(xhat.row(r)).map(|(p, q)| p * q).sum::<f64>()
                            / cols;
                        for (c, d) in dx.row_mut(r).iter_mut().enumerate() {
                            *d = rstd[r] * (dxhat[c] - m1 - xhat.get(r, c) * m2);
                        }
                    }
                    acc(*x, dx);
                }
                let mut dgamma = Tensor::zeros(1, g.cols());
                let mut dbeta = Tensor::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for c in 0..g.cols() {
                        dgamma.data_mut()[c] += g.get(r, c) * xhat.get(r, c);
                        dbeta.data_mut()[c] += g.get(r, c);
                    }
                }
                acc(*gamma, dgamma);
                acc(*beta, dbeta);
            }
            Op::GatherRows(x, index) => {
                let xv = self.value(*x);
                let mut dx = Tensor::zeros(xv.rows(), xv.cols());
                for (k, &i) in index.iter().enumerate() {
                    for (d, &t) in dx.row_mut(i).iter_mut().zip(g.row(k)) {
                        *d += t;
                    }
                }
                acc(*x, dx);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.requires_grad(p) {
                        let mut dp = Tensor::zeros(g.rows(), w);
                        for r in 0..g.rows() {
                            dp.row_mut(r).copy_from_slice(&g.row(r)[off..off + w]);
                        }
                        acc(p, dp);
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (rows, cols) = self.value(p).shape();
                    if self.requires_grad(p) {
                        let slice = g.data()[off * cols..(off + rows) * cols].to_vec();
                        acc(p, Tensor::from_vec(rows, cols, slice));
                    }
                    off += rows;
                }
            }
            Op::SliceCols(x, start) => {
                let xv = self.value(*x);
                let mut dx = Tensor::zeros(xv.rows(), xv.cols());
                for r in 0..g.rows() {
                    dx.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                }
                acc(*x, dx);
            }
            Op::SegmentSoftmax(x, segs) => {
                let mut dx = Tensor::zeros(g.rows(), 1);
                for &(start, len) in segs.spans() {
                    let y = &out.data()[start..start + len];
                    let gr = &g.data()[start..start + len];
                    let dot: f64 = gr.iter().zip(y).map(|(p, q)| p * q).sum();
                    for i in 0..len {
                        dx.data_mut()[start + i] = y[i] * (gr[i] - dot);
                    }
                }
                acc(*x, dx);
            }
            Op::SegmentWeightedSum(x, w, segs) => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                if self.requires_grad(*x) {
                    let mut dx = Tensor::zeros(xv.rows(), xv.cols());
                    for (b, &(start, len)) in segs.spans().iter().enumerate() {
                        for i in start..start + len {
                            let k = wv.get(i, 0);
                            for (d, &t) in dx.row_mut(i).iter_mut().zip(g.row(b)) {
                                *d = k * t;
                            }
                        }
                    }
                    acc(*x, dx);
                }
                if self.requires_grad(*w) {
                    let mut dw = Tensor::zeros(wv.rows(), 1);
                    for (b, &(start, len)) in segs.spans().iter().enumerate() {
                        for i in start..start + len {
                            dw.data_mut()[i] =
                                xv.row(i).iter().zip(g.row(b)).map(|(p, q)| p * q).sum();
                        }
                    }
                    acc(*w, dw);
                }
            }
            Op::SegmentMax(x, arg) => {
                let xv = self.value(*x);
                let cols = xv.cols();
                let mut dx = Tensor::zeros(xv.rows(), cols);
                for (slot, &src) in arg.iter().enumerate() {
                    let (b, c) = (slot / cols, slot % cols);
                    dx.row_mut(src)[c] += g.get(b, c);
                }
                acc(*x, dx);
            }
            Op::Unfold { x, sources, width } => {
                let xv = self.value(*x);
                let cols = xv.cols();
                let mut dx = Tensor::zeros(xv.rows(), cols);
                for (slot, src) in sources.iter().enumerate() {
                    if let Some(s) = src {
                        let (r, k) = (slot / width, slot % width);
                        for (d, &t) in dx
                            .row_mut(*s)
                            .iter_mut()
                            .zip(&g.row(r)[k * cols..(k + 1) * cols])
                        {
                            *d += t;
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::Attention {
                q,
                k,
                v,
                segs,
                heads,
                cache,
            } => {
                let (dq, dk, dv) = kernels::attention_backward(
                    g,
                    self.value(*q),
                    self.value(*k),
                    self.value(*v),
                    cache,
                    segs,
                    *heads,
                );
                acc(*q, dq);
                acc(*k, dk);
                acc(*v, dv);
            }
            Op::Lstm {
                xw,
                wh,
                segs,
                reverse,
                cache,
            } => {
                let (dxw, dwh) =
                    kernels::lstm_backward(g, out, self.value(*wh), cache, segs, *reverse);
                acc(*xw, dxw);
                acc(*wh, dwh);
            }
            Op::Pick(x, entries) => {
                let xv = self.value(*x);
                let mut dx = Tensor::zeros(xv.rows(), xv.cols());
                for (k, &(r, c)) in entries.iter().enumerate() {
                    dx.row_mut(r)[c] += g.get(k, 0);
                }
                acc(*x, dx);
            }
            Op::Sum(x) => {
                let (rows, cols) = self.value(*x).shape();
                acc(*x, Tensor::filled(rows, cols, g.item()));
            }
        }
    }
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&p, &q)| f(p, q)).collect();
    Tensor::from_vec(a.rows(), a.cols(), data)
}

pub fn softmax_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for t in row.iter_mut() {
            *t = (*t - max).exp();
            z += *t;
        }
        for t in row.iter_mut() {
            *t /= z;
        }
    }
    out
}

pub fn log_softmax_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|t| (t - max).exp()).sum::<f64>().ln();
        for t in row.iter_mut() {
            *t -= lse;
        }
    }
    out
}
