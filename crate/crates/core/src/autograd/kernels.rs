//! Fused forward/backward kernels for the recurrent and self-attention ops.

use crate::tensor::{gemm, Segments, Tensor};

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Cached activations of one LSTM direction.
#[derive(Debug, Clone)]
pub struct LstmCache {
    /// Activated gates (input, forget, cell, output) per row, `T x 4h`.
    pub gates: Tensor,
    /// Cell state per row, `T x h`.
    pub cell: Tensor,
}

/// Schedule of (row, previous row) pairs for step `t` over every segment long
/// enough to have one.
fn step_rows(segs: &Segments, t: usize, reverse: bool) -> Vec<(usize, Option<usize>)> {
    segs.spans()
        .iter()
        .filter(|&&(_, len)| len > t)
        .map(|&(start, len)| {
            if reverse {
                let pos = start + len - 1 - t;
                (pos, (t > 0).then(|| pos + 1))
            } else {
                let pos = start + t;
                (pos, (t > 0).then(|| pos - 1))
            }
        })
        .collect()
}

/// Runs the recurrence given precomputed input projections `xw = x W_x + b`.
pub fn lstm_forward(
    xw: &Tensor,
    wh: &Tensor,
    segs: &Segments,
    reverse: bool,
) -> (Tensor, LstmCache) {
    let hidden = wh.rows();
    let total = xw.rows();
    let mut h_out = Tensor::zeros(total, hidden);
    let mut gates = Tensor::zeros(total, 4 * hidden);
    let mut cell = Tensor::zeros(total, hidden);

    for t in 0..segs.max_len() {
        let rows = step_rows(segs, t, reverse);
        let b = rows.len();
        let mut pre = Tensor::zeros(b, 4 * hidden);
        for (k, &(pos, _)) in rows.iter().enumerate() {
            pre.row_mut(k).copy_from_slice(xw.row(pos));
        }
        if t > 0 {
            let mut h_prev = Tensor::zeros(b, hidden);
            for (k, &(_, prev)) in rows.iter().enumerate() {
                h_prev
                    .row_mut(k)
                    .copy_from_slice(h_out.row(prev.expect("t > 0 has a predecessor")));
            }
            gemm(1.0, &h_prev, false, wh, false, 1.0, &mut pre);
        }
        for (k, &(pos, prev)) in rows.iter().enumerate() {
            let p = pre.row(k);
            for j in 0..hidden {
                let i_g = sigmoid(p[j]);
                let f_g = sigmoid(p[hidden + j]);
                let c_g = p[2 * hidden + j].tanh();
                let o_g = sigmoid(p[3 * hidden + j]);
                let c_prev = prev.map_or(0.0, |q| cell.get(q, j));
                let c = f_g * c_prev + i_g * c_g;
                cell.set(pos, j, c);
                h_out.set(pos, j, o_g * c.tanh());
                let gr = gates.row_mut(pos);
                gr[j] = i_g;
                gr[hidden + j] = f_g;
                gr[2 * hidden + j] = c_g;
                gr[3 * hidden + j] = o_g;
            }
        }
    }
    (h_out, LstmCache { gates, cell })
}

/// Backpropagation through time. Returns `(d xw, d wh)`.
pub fn lstm_backward(
    grad_h: &Tensor,
    h_out: &Tensor,
    wh: &Tensor,
    cache: &LstmCache,
    segs: &Segments,
    reverse: bool,
) -> (Tensor, Tensor) {
    let hidden = wh.rows();
    let total = grad_h.rows();
    let mut dxw = Tensor::zeros(total, 4 * hidden);
    let mut dwh = Tensor::zeros(hidden, 4 * hidden);
    let mut dh_rec = Tensor::zeros(total, hidden);
    let mut dc_rec = Tensor::zeros(total, hidden);

    for t in (0..segs.max_len()).rev() {
        let rows = step_rows(segs, t, reverse);
        let b = rows.len();
        let mut da = Tensor::zeros(b, 4 * hidden);
        for (k, &(pos, prev)) in rows.iter().enumerate() {
            let gr = cache.gates.row(pos);
            for j in 0..hidden {
                let (i_g, f_g, c_g, o_g) =
                    (gr[j], gr[hidden + j], gr[2 * hidden + j], gr[3 * hidden + j]);
                let c = cache.cell.get(pos, j);
                let tc = c.tanh();
                let dh = grad_h.get(pos, j) + dh_rec.get(pos, j);
                let dc = dc_rec.get(pos, j) + dh * o_g * (1.0 - tc * tc);
                let c_prev = prev.map_or(0.0, |q| cache.cell.get(q, j));
                let row = da.row_mut(k);
                row[j] = dc * c_g * i_g * (1.0 - i_g);
                row[hidden + j] = dc * c_prev * f_g * (1.0 - f_g);
                row[2 * hidden + j] = dc * i_g * (1.0 - c_g * c_g);
                row[3 * hidden + j] = dh * tc * o_g * (1.0 - o_g);
                if let Some(q) = prev {
                    let v = dc_rec.get(q, j) + dc * f_g;
                    dc_rec.set(q, j, v);
                }
            }
            dxw.row_mut(pos).copy_from_slice(da.row(k));
        }
        if t > 0 {
            let mut h_prev = Tensor::zeros(b, hidden);
            for (k, &(_, prev)) in rows.iter().enumerate() {
                h_prev.row_mut(k).copy_from_slice(h_out.row(prev.unwrap()));
            }
            gemm(1.0, &h_prev, true, &da, false, 1.0, &mut dwh);
            let mut dh_prev = Tensor::zeros(b, hidden);
            gemm(1.0, &da, false, wh, true, 0.0, &mut dh_prev);
            for (k, &(_, prev)) in rows.iter().enumerate() {
                let q = prev.unwrap();
                for (dst, src) in dh_rec.row_mut(q).iter_mut().zip(dh_prev.row(k)) {
                    *dst += *src;
                }
            }
        }
    }
    (dxw, dwh)
}

/// Per-(segment, head) attention probabilities, each `len x len` row-major.
#[derive(Debug, Clone)]
pub struct AttentionCache {
    pub probs: Vec<Vec<f64>>,
}

pub fn attention_forward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    segs: &Segments,
    heads: usize,
) -> (Tensor, AttentionCache) {
    let d = q.cols();
    let dk = d / heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut out = Tensor::zeros(q.rows(), d);
    let mut probs = Vec::with_capacity(segs.len() * heads);
    for &(start, len) in segs.spans() {
        for h in 0..heads {
            let off = h * dk;
            let mut p = vec![0.0; len * len];
            for i in 0..len {
                let qi = &q.row(start + i)[off..off + dk];
                let row = &mut p[i * len..(i + 1) * len];
                let mut max = f64::NEG_INFINITY;
                for (j, s) in row.iter_mut().enumerate() {
                    let kj = &k.row(start + j)[off..off + dk];
                    *s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                    max = max.max(*s);
                }
                let mut z = 0.0;
                for s in row.iter_mut() {
                    *s = (*s - max).exp();
                    z += *s;
                }
                for s in row.iter_mut() {
                    *s /= z;
                }
                let orow = &mut out.row_mut(start + i)[off..off + dk];
                for (j, &pij) in row.iter().enumerate() {
                    let vj = &v.row(start + j)[off..off + dk];
                    for (o, &x) in orow.iter_mut().zip(vj) {
                        *o += pij * x;
                    }
                }
            }
            probs.push(p);
        }
    }
    (out, AttentionCache { probs })
}

/// Returns `(d q, d k, d v)`.
#[allow(clippy::too_many_arguments)]
pub fn attention_backward(
    grad: &Tensor,
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    cache: &AttentionCache,
    segs: &Segments,
    heads: usize,
) -> (Tensor, Tensor, Tensor) {
    let d = q.cols();
    let dk = d / heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut dq = Tensor::zeros(q.rows(), d);
    let mut dkm = Tensor::zeros(k.rows(), d);
    let mut dv = Tensor::zeros(v.rows(), d);
    let mut idx = 0;
    for &(start, len) in segs.spans() {
        for h in 0..heads {
            let off = h * dk;
            let p = &cache.probs[idx];
            idx += 1;
            for i in 0..len {
                let gi = &grad.row(start + i)[off..off + dk];
                let prow = &p[i * len..(i + 1) * len];
                // dP_ij = g_i . v_j
                let mut dp = vec![0.0; len];
                for (j, dpj) in dp.iter_mut().enumerate() {
                    let vj = &v.row(start + j)[off..off + dk];
                    *dpj = gi.iter().zip(vj).map(|(a, b)| a * b).sum();
                    let dvj = &mut dv.row_mut(start + j)[off..off + dk];
                    for (o, &x) in dvj.iter_mut().zip(gi) {
                        *o += prow[j] * x;
                    }
                }
                let dot: f64 = dp.iter().zip(prow).map(|(a, b)| a * b).sum();
                for j in 0..len {
                    let ds = prow[j] * (dp[j] - dot) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    for c in 0..dk {
                        let kj = k.get(start + j, off + c);
                        let qi = q.get(start + i, off + c);
                        dq.row_mut(start + i)[off + c] += ds * kj;
                        dkm.row_mut(start + j)[off + c] += ds * qi;
                    }
                }
            }
        }
    }
    (dq, dkm, dv)
}
