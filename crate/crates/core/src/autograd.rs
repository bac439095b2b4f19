//! Reverse-mode automatic differentiation over dense row-major `f64` matrices.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s; calling
//! [`Tape::backward`] on a scalar node walks the record in reverse and
//! returns the gradient of that scalar with respect to every node that
//! (transitively) depends on a leaf created with [`Tape::leaf`].
//!
//! Everything is two-dimensional. Feature maps are stored as `(H*W) x C`
//! matrices, vectors as `1 x n` rows.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

/// Marker for a gather index that produces an implicit zero (used for padding).
pub const PAD: usize = usize::MAX;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "tensor data length does not match {rows}x{cols}");
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self { rows, cols, data: vec![value; rows * cols] }
    }

    pub fn scalar(value: f64) -> Self {
        Self { rows: 1, cols: 1, data: vec![value] }
    }

    pub fn row_vector(data: Vec<f64>) -> Self {
        Self { rows: 1, cols: data.len(), data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            assert_eq!(row.len(), cols, "ragged rows");
            data.extend_from_slice(row);
        }
        Self { rows: rows.len(), cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
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

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|r| self.row(r).to_vec()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
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

    pub fn matmul(&self, other: &Tensor) -> Tensor {
        gemm(self, false, other, false)
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    fn zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        assert_eq!(self.shape(), other.shape(), "elementwise shape mismatch");
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape(), other.shape(), "gradient shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// `op(a) * op(b)` where `op` optionally transposes.
fn gemm(a: &Tensor, ta: bool, b: &Tensor, tb: bool) -> Tensor {
    let (m, k) = if ta { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let (k2, n) = if tb { (b.cols, b.rows) } else { (b.rows, b.cols) };
    assert_eq!(k, k2, "matmul inner dimension mismatch");
    let mut out = Tensor::zeros(m, n);
    if m == 0 || n == 0 || k == 0 {
        return out;
    }
    let (rsa, csa) = if ta { (1, a.cols as isize) } else { (a.cols as isize, 1) };
    let (rsb, csb) = if tb { (1, b.cols as isize) } else { (b.cols as isize, 1) };
    // SAFETY: strides describe the exact extents of `a`, `b` and `out`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            0.0,
            out.data.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    Offset(usize),
    Relu(usize),
    Sigmoid(usize),
    Exp(usize),
    Ln(usize),
    Sqrt(usize),
    Square(usize),
    Clamp(usize, f64, f64),
    Gather(usize, Rc<[usize]>),
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    SumAll(usize),
    SumRows(usize),
    SumCols(usize),
    LogSoftmaxRows(usize),
    Reverse(usize, f64),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros shaped like `like` when `v` was unreachable.
    pub fn get_or_zeros(&self, v: Var, rows: usize, cols: usize) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(rows, cols))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// Trainable input: gradients flow to it.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar_constant(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let t = self.value(v);
        assert_eq!(t.shape(), (1, 1), "not a scalar node");
        t.data[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = gemm(self.value(a), false, self.value(b), false);
        let rg = self.rg(&[a.0, b.0]);
        self.push(value, Op::MatMul(a.0, b.0), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let rg = self.rg(&[a.0]);
        self.push(value, Op::Transpose(a.0), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip(self.value(b), |x, y| x + y);
        let rg = self.rg(&[a.0, b.0]);
        self.push(value, Op::Add(a.0, b.0), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip(self.value(b), |x, y| x - y);
        let rg = self.rg(&[a.0, b.0]);
        self.push(value, Op::Sub(a.0, b.0), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip(self.value(b), |x, y| x * y);
        let rg = self.rg(&[a.0, b.0]);
        self.push(value, Op::Mul(a.0, b.0), rg)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip(self.value(b), |x, y| x / y);
        let rg = self.rg(&[a.0, b.0]);
        self.push(value, Op::Div(a.0, b.0), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x * s);
        let rg = self.rg(&[a.0]);
        self.push(value, Op::Scale(a.0, s), rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x + s);
        let rg = self.rg(&[a.0]);
        self.push(value, Op::Offset(a.0), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        let rg = self.rg(&[a.0]);
        self.push(value, Op::Relu(a.0), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        let rg = self.rg(&[a.0]);
        self.push(value, Op::Sigmoid(a.0), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        let rg = self.rg(&[a.0]);
        self.push(value, Op::Exp(a.0), rg)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::ln);
        let rg = self.rg(&[a.0]);
        self.push(value, Op::Ln(a.0), rg)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::sqrt);
        let rg = self.rg(&[a.0]);
        self.push(value, Op::Sqrt(a.0), rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x * x);
        let rg = self.rg(&[a.0]);
        self.push(value, Op::Square(a.0), rg)
    }

    /// Clamp into `[lo, hi]`; the gradient is zero where clamping was active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(a).map(|x| x.clamp(lo, hi));
        let rg = self.rg(&[a.0]);
        self.push(value, Op::Clamp(a.0, lo, hi), rg)
    }

    /// `out[i] = src[index[i]]` over the flat row-major storage, with [`PAD`]
    /// producing zero. The backward pass scatter-adds.
    pub fn gather(&mut self, src: Var, index: Rc<[usize]>, rows: usize, cols: usize) -> Var {
        assert_eq!(index.len(), rows * cols, "gather index length mismatch");
        let s = self.value(src).data();
        let data = index.iter().map(|&i| if i == PAD { 0.0 } else { s[i] }).collect();
        let rg = self.rg(&[src.0]);
        self.push(Tensor::new(rows, cols, data), Op::Gather(src.0, index), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|p| self.value(*p).cols).sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut offset = 0;
        for p in parts {
            let t = self.value(*p);
            assert_eq!(t.rows, rows, "concat_cols row mismatch");
            for r in 0..rows {
                out.data[r * cols + offset..r * cols + offset + t.cols].copy_from_slice(t.row(r));
            }
            offset += t.cols;
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let rg = self.rg(&ids);
        self.push(out, Op::ConcatCols(ids), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let t = self.value(*p);
            assert_eq!(t.cols, cols, "concat_rows column mismatch");
            data.extend_from_slice(&t.data);
            rows += t.rows;
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let rg = self.rg(&ids);
        self.push(Tensor::new(rows, cols, data), Op::ConcatRows(ids), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).data.iter().sum());
        let rg = self.rg(&[a.0]);
        self.push(value, Op::SumAll(a.0), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Column sums: `rows x cols -> 1 x cols`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let mut out = Tensor::zeros(1, t.cols);
        for r in 0..t.rows {
            for (o, v) in out.data.iter_mut().zip(t.row(r)) {
                *o += v;
            }
        }
        let rg = self.rg(&[a.0]);
        self.push(out, Op::SumRows(a.0), rg)
    }

    /// Row sums: `rows x cols -> rows x 1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let data = (0..t.rows).map(|r| t.row(r).iter().sum()).collect();
        let value = Tensor::new(t.rows, 1, data);
        let rg = self.rg(&[a.0]);
        self.push(value, Op::SumCols(a.0), rg)
    }

    /// Row-wise log-softmax, stabilized by subtracting the row maximum.
    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let mut out = Tensor::zeros(t.rows, t.cols);
        for r in 0..t.rows {
            let row = t.row(r);
            let lse = log_sum_exp(row);
            for (c, v) in row.iter().enumerate() {
                out.data[r * t.cols + c] = v - lse;
            }
        }
        let rg = self.rg(&[a.0]);
        self.push(out, Op::LogSoftmaxRows(a.0), rg)
    }

    /// Identity forward; the backward pass multiplies the gradient by `-strength`.
    pub fn reverse_gradient(&mut self, a: Var, strength: f64) -> Var {
        let value = self.value(a).clone();
        let rg = self.rg(&[a.0]);
        self.push(value, Op::Reverse(a.0, strength), rg)
    }

    // ---- composite helpers -------------------------------------------------

    /// Broadcast a `1 x n` row to `rows x n`.
    pub fn broadcast_row(&mut self, v: Var, rows: usize) -> Var {
        let (r, n) = self.shape(v);
        assert_eq!(r, 1, "broadcast_row expects a row vector");
        let index: Rc<[usize]> = (0..rows * n).map(|i| i % n).collect();
        self.gather(v, index, rows, n)
    }

    /// Broadcast an `m x 1` column to `m x cols`.
    pub fn broadcast_col(&mut self, v: Var, cols: usize) -> Var {
        let (m, c) = self.shape(v);
        assert_eq!(c, 1, "broadcast_col expects a column vector");
        let index: Rc<[usize]> = (0..m * cols).map(|i| i / cols).collect();
        self.gather(v, index, m, cols)
    }

    pub fn broadcast_scalar(&mut self, v: Var, rows: usize, cols: usize) -> Var {
        assert_eq!(self.shape(v), (1, 1), "broadcast_scalar expects a scalar");
        let index: Rc<[usize]> = vec![0; rows * cols].into();
        self.gather(v, index, rows, cols)
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let rows = self.shape(a).0;
        let b = self.broadcast_row(row, rows);
        self.add(a, b)
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let rows = self.shape(a).0;
        let b = self.broadcast_row(row, rows);
        self.mul(a, b)
    }

    pub fn select_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let (rows, cols) = self.shape(a);
        assert!(start <= end && end <= cols);
        let w = end - start;
        let index: Rc<[usize]> =
            (0..rows).flat_map(|r| (start..end).map(move |c| r * cols + c)).collect();
        self.gather(a, index, rows, w)
    }

    pub fn select_rows(&mut self, a: Var, rows_idx: &[usize]) -> Var {
        let cols = self.shape(a).1;
        let index: Rc<[usize]> =
            rows_idx.iter().flat_map(|&r| (0..cols).map(move |c| r * cols + c)).collect();
        self.gather(a, index, rows_idx.len(), cols)
    }

    /// Normalize every row to unit Euclidean norm.
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let cols = self.shape(a).1;
        let sq = self.square(a);
        let ss = self.sum_cols(sq);
        let ss = self.add_scalar(ss, 1e-12);
        let norm = self.sqrt(ss);
        let norm = self.broadcast_col(norm, cols);
        self.div(a, norm)
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "backward requires a scalar loss");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[id];
        let val = |i: usize| &self.nodes[i].value;
        let wants = |i: usize| self.nodes[i].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if wants(*a) {
                    accumulate(grads, *a, gemm(g, false, val(*b), true));
                }
                if wants(*b) {
                    accumulate(grads, *b, gemm(val(*a), true, g, false));
                }
            }
            Op::Transpose(a) => accumulate(grads, *a, g.transpose()),
            Op::Add(a, b) => {
                if wants(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if wants(*b) {
                    accumulate(grads, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if wants(*b) {
                    accumulate(grads, *b, g.map(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    accumulate(grads, *a, g.zip(val(*b), |x, y| x * y));
                }
                if wants(*b) {
                    accumulate(grads, *b, g.zip(val(*a), |x, y| x * y));
                }
            }
            Op::Div(a, b) => {
                if wants(*a) {
                    accumulate(grads, *a, g.zip(val(*b), |x, y| x / y));
                }
                if wants(*b) {
                    // d(a/b)/db = -(a/b)/b = -out/b
                    let t = g.zip(&node.value, |x, o| x * o);
                    accumulate(grads, *b, t.zip(val(*b), |x, y| -x / y));
                }
            }
            Op::Scale(a, s) => accumulate(grads, *a, g.map(|x| x * s)),
            Op::Offset(a) => accumulate(grads, *a, g.clone()),
            Op::Relu(a) => accumulate(grads, *a, g.zip(val(*a), |x, v| if v > 0.0 { x } else { 0.0 })),
            Op::Sigmoid(a) => accumulate(grads, *a, g.zip(&node.value, |x, y| x * y * (1.0 - y))),
            Op::Exp(a) => accumulate(grads, *a, g.zip(&node.value, |x, y| x * y)),
            Op::Ln(a) => accumulate(grads, *a, g.zip(val(*a), |x, v| x / v)),
            Op::Sqrt(a) => accumulate(grads, *a, g.zip(&node.value, |x, y| 0.5 * x / y)),
            Op::Square(a) => accumulate(grads, *a, g.zip(val(*a), |x, v| 2.0 * x * v)),
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                accumulate(grads, *a, g.zip(val(*a), |x, v| if v < lo || v > hi { 0.0 } else { x }))
            }
            Op::Gather(src, index) => {
                let s = val(*src);
                let mut out = Tensor::zeros(s.rows, s.cols);
                for (gi, &i) in g.data.iter().zip(index.iter()) {
                    if i != PAD {
                        out.data[i] += gi;
                    }
                }
                accumulate(grads, *src, out);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = val(p).cols;
                    if wants(p) {
                        let mut part = Tensor::zeros(g.rows, w);
                        for r in 0..g.rows {
                            part.data[r * w..(r + 1) * w]
                                .copy_from_slice(&g.data[r * g.cols + offset..r * g.cols + offset + w]);
                        }
                        accumulate(grads, p, part);
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let t = val(p);
                    let n = t.len();
                    if wants(p) {
                        accumulate(grads, p, Tensor::new(t.rows, t.cols, g.data[offset..offset + n].to_vec()));
                    }
                    offset += n;
                }
            }
            Op::SumAll(a) => {
                let t = val(*a);
                accumulate(grads, *a, Tensor::filled(t.rows, t.cols, g.data[0]));
            }
            Op::SumRows(a) => {
                let t = val(*a);
                accumulate(grads, *a, Tensor::from_fn(t.rows, t.cols, |_, c| g.data[c]));
            }
            Op::SumCols(a) => {
                let t = val(*a);
                accumulate(grads, *a, Tensor::from_fn(t.rows, t.cols, |r, _| g.data[r]));
            }
            Op::LogSoftmaxRows(a) => {
                let y = &node.value;
                let mut out = Tensor::zeros(y.rows, y.cols);
                for r in 0..y.rows {
                    let gsum: f64 = g.row(r).iter().sum();
                    for c in 0..y.cols {
                        let i = r * y.cols + c;
                        out.data[i] = g.data[i] - y.data[i].exp() * gsum;
                    }
                }
                accumulate(grads, *a, out);
            }
            Op::Reverse(a, s) => accumulate(grads, *a, g.map(|x| -s * x)),
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: usize, g: Tensor) {
    match &mut grads[id] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}
