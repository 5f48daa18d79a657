//! Dense row-major 2-D arrays of `f64`.
//!
//! Everything in the toolkit is expressed as matrices: a sentence batch is a
//! `tokens x features` matrix and per-sentence structure is carried separately
//! as [`Segments`].

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(
            rows * cols,
            data.len(),
            "tensor data length does not match {rows}x{cols}"
        );
        Tensor { rows, cols, data }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::from_vec(1, 1, vec![value])
    }

    pub fn column(values: Vec<f64>) -> Self {
        let n = values.len();
        Tensor::from_vec(n, 1, values)
    }

    pub fn row_vector(values: Vec<f64>) -> Self {
        let n = values.len();
        Tensor::from_vec(1, n, values)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let c = self.cols;
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on a non-scalar tensor");
        self.data[0]
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn scale_inplace(&mut self, k: f64) {
        for a in &mut self.data {
            *a *= k;
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn transpose(&self) -> Tensor {
        let mut out = Tensor::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Index of the largest entry of row `r`; the first one on ties.
    pub fn argmax_row(&self, r: usize) -> usize {
        argmax(self.row(r))
    }
}

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// `out = alpha * op(a) * op(b) + beta * out` where `op` optionally transposes.
pub fn gemm(
    alpha: f64,
    a: &Tensor,
    trans_a: bool,
    b: &Tensor,
    trans_b: bool,
    beta: f64,
    out: &mut Tensor,
) {
    let (m, k) = if trans_a {
        (a.cols, a.rows)
    } else {
        (a.rows, a.cols)
    };
    let (k2, n) = if trans_b {
        (b.cols, b.rows)
    } else {
        (b.rows, b.cols)
    };
    assert_eq!(k, k2, "gemm inner dimension mismatch");
    assert_eq!((out.rows, out.cols), (m, n), "gemm output shape mismatch");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        out.scale_inplace(beta);
        return;
    }
    let (rsa, csa) = if trans_a {
        (1, a.cols as isize)
    } else {
        (a.cols as isize, 1)
    };
    let (rsb, csb) = if trans_b {
        (1, b.cols as isize)
    } else {
        (b.cols as isize, 1)
    };
    // SAFETY: the strides above describe exactly the row-major buffers of `a`,
    // `b` and `out`, whose lengths were checked against m, k, n.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            out.data.as_mut_ptr(),
            out.cols as isize,
            1,
        );
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(a.rows, b.cols);
    gemm(1.0, a, false, b, false, 0.0, &mut out);
    out
}

/// Contiguous row ranges, one per sentence of a batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segments {
    spans: Vec<(usize, usize)>,
    total: usize,
}

impl Segments {
    pub fn from_lengths(lengths: &[usize]) -> Self {
        let mut spans = Vec::with_capacity(lengths.len());
        let mut start = 0;
        for &len in lengths {
            spans.push((start, len));
            start += len;
        }
        Segments {
            spans,
            total: start,
        }
    }

    pub fn single(len: usize) -> Self {
        Segments::from_lengths(&[len])
    }

    pub fn len(&self) -> usize {
        self.spans.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spans.is_empty()
    }

    /// Total number of rows covered.
    pub fn total(&self) -> usize {
        self.total
    }

    pub fn spans(&self) -> &[(usize, usize)] {
        &self.spans
    }

    pub fn span(&self, i: usize) -> (usize, usize) {
        self.spans[i]
    }

    pub fn max_len(&self) -> usize {
        self.spans.iter().map(|s| s.1).max().unwrap_or(0)
    }

    /// Row index -> segment index.
    pub fn owners(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.total);
        for (i, &(_, len)) in self.spans.iter().enumerate() {
            out.extend(std::iter::repeat_n(i, len));
        }
        out
    }
}
