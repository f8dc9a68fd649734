//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation of one forward pass. Nodes are
//! appended in evaluation order, so a single reverse sweep over the node
//! list is a valid topological order for backpropagation.

use std::borrow::Cow;

use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Input,
    Param,
    MatMul(usize, usize),
    /// `a · bᵀ`
    MatMulT(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    /// `a + 1ᵀ r` with `r` a row vector broadcast over rows.
    AddRow(usize, usize),
    /// `a ⊙ 1ᵀ r`
    MulRow(usize, usize),
    /// `a ⊙ c` with `c` a column vector broadcast over columns.
    MulCol(usize, usize),
    /// `a · s` with `s` a `1 × 1` node.
    ScaleVar(usize, usize),
    Scale(usize, f64),
    AddConst(usize),
    LeakyRelu(usize, f64),
    Sigmoid(usize),
    Tanh(usize),
    Exp(usize),
    Log(usize),
    Cos(usize),
    Square(usize),
    Sqrt(usize),
    Clamp(usize, f64, f64),
    Huber(usize, f64),
    SoftmaxRows(usize),
    LogSoftmaxRows(usize),
    LayerNorm { a: usize, inv_std: Vec<f64> },
    L2NormalizeRows { a: usize, norms: Vec<f64>, eps: f64 },
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    SliceCols(usize, usize),
    SliceRows(usize, usize),
    Reshape(usize),
    Transpose(usize),
    GatherRows(usize, Vec<usize>),
    SegmentMax { a: usize, argmax: Vec<Option<usize>> },
    StraightThrough { logits: usize, pi: Tensor, inv_tau: f64 },
    SumAll(usize),
    SumRows(usize),
    SumCols(usize),
    RowNorms(usize),
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Forward record of one computation.
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
    params: Vec<(ParamId, usize)>,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of one scalar output with respect to every recorded node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Adds each parameter gradient into `acc`, which is indexed by [`ParamId`].
    pub fn accumulate_params(&self, acc: &mut [Tensor]) {
        for &(pid, node) in &self.params {
            if let Some(g) = &self.grads[node] {
                acc[pid.index()].add_assign(g);
            }
        }
    }

    /// Dense per-parameter gradients (zeros where a parameter was unused).
    pub fn param_grads(&self, store: &ParamStore) -> Vec<Tensor> {
        let mut acc = store.zeros_like();
        self.accumulate_params(&mut acc);
        acc
    }
}

fn softmax_row(src: &[f64], dst: &mut [f64]) {
    let m = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for (d, &x) in dst.iter_mut().zip(src) {
        *d = (x - m).exp();
        s += *d;
    }
    for d in dst.iter_mut() {
        *d /= s;
    }
}

/// Row-wise softmax with an optional column mask; fully masked rows become zeros.
pub fn softmax_rows_masked(x: &Tensor, mask: Option<&[bool]>) -> Tensor {
    let mut out = Tensor::zeros(x.rows(), x.cols());
    for r in 0..x.rows() {
        let src = x.row(r);
        match mask {
            None => softmax_row(src, out.row_mut(r)),
            Some(m) => {
                let mx = src
                    .iter()
                    .zip(m)
                    .filter(|(_, &ok)| ok)
                    .map(|(&v, _)| v)
                    .fold(f64::NEG_INFINITY, f64::max);
                if mx == f64::NEG_INFINITY {
                    continue;
                }
                let dst = out.row_mut(r);
                let mut s = 0.0;
                for c in 0..src.len() {
                    if m[c] {
                        dst[c] = (src[c] - mx).exp();
                        s += dst[c];
                    }
                }
                for d in dst.iter_mut() {
                    *d /= s;
                }
            }
        }
    }
    out
}

/// Index of the row maximum with lowest-index tie-break.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::with_capacity(512), params: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value: Cow::Owned(value), op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: usize) -> bool {
        self.nodes[v].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Constant input; receives no gradient.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, false)
    }

    /// Borrowed constant input.
    pub fn input_ref(&mut self, t: &'a Tensor) -> Var {
        self.nodes.push(Node { value: Cow::Borrowed(t), op: Op::Input, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives a gradient without being tied to a parameter store.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, true)
    }

    pub fn param(&mut self, store: &'a ParamStore, id: ParamId) -> Var {
        self.nodes.push(Node { value: Cow::Borrowed(store.get(id)), op: Op::Param, needs_grad: true });
        let v = self.nodes.len() - 1;
        self.params.push((id, v));
        Var(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        let ng = self.ng(a.0) || self.ng(b.0);
        self.push(v, Op::MatMul(a.0, b.0), ng)
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_t(self.value(b));
        let ng = self.ng(a.0) || self.ng(b.0);
        self.push(v, Op::MatMulT(a.0, b.0), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.ng(a.0) || self.ng(b.0);
        self.push(v, Op::Add(a.0, b.0), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.ng(a.0) || self.ng(b.0);
        self.push(v, Op::Sub(a.0, b.0), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.ng(a.0) || self.ng(b.0);
        self.push(v, Op::Mul(a.0, b.0), ng)
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (ra, ca) = self.shape(a);
        assert_eq!(self.shape(row), (1, ca), "add_row broadcast shape");
        let mut v = self.value(a).clone();
        let r = self.value(row).data().to_vec();
        for i in 0..ra {
            for (x, b) in v.row_mut(i).iter_mut().zip(&r) {
                *x += b;
            }
        }
        let ng = self.ng(a.0) || self.ng(row.0);
        self.push(v, Op::AddRow(a.0, row.0), ng)
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (ra, ca) = self.shape(a);
        assert_eq!(self.shape(row), (1, ca), "mul_row broadcast shape");
        let mut v = self.value(a).clone();
        let r = self.value(row).data().to_vec();
        for i in 0..ra {
            for (x, b) in v.row_mut(i).iter_mut().zip(&r) {
                *x *= b;
            }
        }
        let ng = self.ng(a.0) || self.ng(row.0);
        self.push(v, Op::MulRow(a.0, row.0), ng)
    }

    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let (ra, _) = self.shape(a);
        assert_eq!(self.shape(col), (ra, 1), "mul_col broadcast shape");
        let mut v = self.value(a).clone();
        let c = self.value(col).data().to_vec();
        for (i, &s) in c.iter().enumerate() {
            for x in v.row_mut(i) {
                *x *= s;
            }
        }
        let ng = self.ng(a.0) || self.ng(col.0);
        self.push(v, Op::MulCol(a.0, col.0), ng)
    }

    pub fn scale_var(&mut self, a: Var, s: Var) -> Var {
        let sv = self.value(s).item();
        let v = self.value(a).map(|x| x * sv);
        let ng = self.ng(a.0) || self.ng(s.0);
        self.push(v, Op::ScaleVar(a.0, s.0), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x * s);
        let ng = self.ng(a.0);
        self.push(v, Op::Scale(a.0, s), ng)
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x + c);
        let ng = self.ng(a.0);
        self.push(v, Op::AddConst(a.0), ng)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        let ng = self.ng(a.0);
        self.push(v, Op::LeakyRelu(a.0, slope), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| 1.0 / (1.0 + (-x).exp()));
        let ng = self.ng(a.0);
        self.push(v, Op::Sigmoid(a.0), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        let ng = self.ng(a.0);
        self.push(v, Op::Tanh(a.0), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        let ng = self.ng(a.0);
        self.push(v, Op::Exp(a.0), ng)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::ln);
        let ng = self.ng(a.0);
        self.push(v, Op::Log(a.0), ng)
    }

    pub fn cos(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::cos);
        let ng = self.ng(a.0);
        self.push(v, Op::Cos(a.0), ng)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        let ng = self.ng(a.0);
        self.push(v, Op::Square(a.0), ng)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::sqrt);
        let ng = self.ng(a.0);
        self.push(v, Op::Sqrt(a.0), ng)
    }

    /// Clamp with zero gradient outside `[lo, hi]`.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(a).map(|x| x.clamp(lo, hi));
        let ng = self.ng(a.0);
        self.push(v, Op::Clamp(a.0, lo, hi), ng)
    }

    /// Elementwise Huber penalty of the input residual.
    pub fn huber(&mut self, a: Var, delta: f64) -> Var {
        let v = self.value(a).map(|x| huber(x, delta));
        let ng = self.ng(a.0);
        self.push(v, Op::Huber(a.0, delta), ng)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = softmax_rows_masked(self.value(a), None);
        let ng = self.ng(a.0);
        self.push(v, Op::SoftmaxRows(a.0), ng)
    }

    /// Softmax with a column mask. Masked columns get probability 0; rows
    /// with no valid column are all zero.
    pub fn softmax_rows_masked(&mut self, a: Var, mask: &[bool]) -> Var {
        assert_eq!(mask.len(), self.shape(a).1);
        let v = softmax_rows_masked(self.value(a), Some(mask));
        let ng = self.ng(a.0);
        // Masked entries are exact zeros, so the plain softmax Jacobian
        // `p ⊙ (g − p·g)` already vanishes there.
        self.push(v, Op::SoftmaxRows(a.0), ng)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut v = Tensor::zeros(x.rows(), x.cols());
        for r in 0..x.rows() {
            let row = x.row(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|&z| (z - m).exp()).sum::<f64>().ln();
            for (d, &z) in v.row_mut(r).iter_mut().zip(row) {
                *d = z - lse;
            }
        }
        let ng = self.ng(a.0);
        self.push(v, Op::LogSoftmaxRows(a.0), ng)
    }

    /// Row standardization `(x − mean) / sqrt(var + eps)` without affine terms.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let n = x.cols() as f64;
        let mut v = Tensor::zeros(x.rows(), x.cols());
        let mut inv_std = Vec::with_capacity(x.rows());
        for r in 0..x.rows() {
            let row = x.row(r);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|z| (z - mean) * (z - mean)).sum::<f64>() / n;
            let is = 1.0 / (var + eps).sqrt();
            for (d, &z) in v.row_mut(r).iter_mut().zip(row) {
                *d = (z - mean) * is;
            }
            inv_std.push(is);
        }
        let ng = self.ng(a.0);
        self.push(v, Op::LayerNorm { a: a.0, inv_std }, ng)
    }

    /// Rows divided by `max(‖row‖, eps)`. Returns the node and whether any
    /// row hit the epsilon guard.
    pub fn l2_normalize_rows(&mut self, a: Var, eps: f64) -> (Var, bool) {
        let x = self.value(a);
        let mut v = x.clone();
        let mut norms = Vec::with_capacity(x.rows());
        let mut guarded = false;
        for r in 0..x.rows() {
            let n = x.row(r).iter().map(|z| z * z).sum::<f64>().sqrt();
            let d = if n > eps {
                n
            } else {
                guarded = true;
                eps
            };
            for z in v.row_mut(r) {
                *z /= d;
            }
            norms.push(n);
        }
        let ng = self.ng(a.0);
        (self.push(v, Op::L2NormalizeRows { a: a.0, norms, eps }, ng), guarded)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.shape(parts[0]).0;
        let cols: usize = parts.iter().map(|p| self.shape(*p).1).sum();
        let mut v = Tensor::zeros(rows, cols);
        let mut off = 0;
        for p in parts {
            let t = self.value(*p);
            assert_eq!(t.rows(), rows, "concat_cols row mismatch");
            for r in 0..rows {
                v.row_mut(r)[off..off + t.cols()].copy_from_slice(t.row(r));
            }
            off += t.cols();
        }
        let ng = parts.iter().any(|p| self.ng(p.0));
        self.push(v, Op::ConcatCols(parts.iter().map(|p| p.0).collect()), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.shape(parts[0]).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let t = self.value(*p);
            assert_eq!(t.cols(), cols, "concat_rows col mismatch");
            data.extend_from_slice(t.data());
            rows += t.rows();
        }
        let ng = parts.iter().any(|p| self.ng(p.0));
        self.push(Tensor::from_vec(rows, cols, data), Op::ConcatRows(parts.iter().map(|p| p.0).collect()), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let x = self.value(a);
        assert!(start + len <= x.cols());
        let mut v = Tensor::zeros(x.rows(), len);
        for r in 0..x.rows() {
            v.row_mut(r).copy_from_slice(&x.row(r)[start..start + len]);
        }
        let ng = self.ng(a.0);
        self.push(v, Op::SliceCols(a.0, start), ng)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice_rows(start, len);
        let ng = self.ng(a.0);
        self.push(v, Op::SliceRows(a.0, start), ng)
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let v = self.value(a).clone().reshape(rows, cols);
        let ng = self.ng(a.0);
        self.push(v, Op::Reshape(a.0), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        let ng = self.ng(a.0);
        self.push(v, Op::Transpose(a.0), ng)
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let x = self.value(a);
        let mut v = Tensor::zeros(idx.len(), x.cols());
        for (i, &j) in idx.iter().enumerate() {
            v.row_mut(i).copy_from_slice(x.row(j));
        }
        let ng = self.ng(a.0);
        self.push(v, Op::GatherRows(a.0, idx.to_vec()), ng)
    }

    /// Column-wise max over each `(start, len)` row segment, restricted to
    /// rows whose `valid` flag is set. Ties go to the lowest row index; a
    /// segment with no valid rows yields zeros.
    pub fn segment_max(&mut self, a: Var, segments: &[(usize, usize)], valid: &[bool]) -> Var {
        let x = self.value(a);
        assert_eq!(valid.len(), x.rows());
        let d = x.cols();
        let mut v = Tensor::zeros(segments.len(), d);
        let mut argmax = vec![None; segments.len() * d];
        for (s, &(start, len)) in segments.iter().enumerate() {
            for r in start..start + len {
                if !valid[r] {
                    continue;
                }
                let row = x.row(r);
                for c in 0..d {
                    let slot = &mut argmax[s * d + c];
                    match *slot {
                        None => {
                            *slot = Some(r);
                            v.set(s, c, row[c]);
                        }
                        Some(_) if row[c] > v.get(s, c) => {
                            *slot = Some(r);
                            v.set(s, c, row[c]);
                        }
                        _ => {}
                    }
                }
            }
        }
        let ng = self.ng(a.0);
        self.push(v, Op::SegmentMax { a: a.0, argmax }, ng)
    }

    /// Straight-through categorical selection. The forward value is the hard
    /// one-hot argmax of `logits + noise`; the backward pass is that of
    /// `pi = softmax((logits + noise) / tau)`. Returns the node and `pi`.
    pub fn straight_through(&mut self, logits: Var, tau: f64, noise: Option<&Tensor>) -> (Var, Tensor) {
        let (v, pi, _) = self.straight_through_select(logits, tau, noise, false);
        (v, pi)
    }

    /// [`Graph::straight_through`] that also returns the selected column per
    /// row. With `unique`, rows pick greedily in order among columns not
    /// already taken by an earlier row (while any remain).
    pub fn straight_through_select(&mut self, logits: Var, tau: f64, noise: Option<&Tensor>, unique: bool) -> (Var, Tensor, Vec<usize>) {
        let z = self.value(logits);
        let mut pert = z.clone();
        if let Some(g) = noise {
            pert.add_assign(g);
        }
        let pi = softmax_rows_masked(&pert.map(|x| x / tau), None);
        let mut hard = Tensor::zeros(z.rows(), z.cols());
        let mut taken = vec![false; z.cols()];
        let mut idx = Vec::with_capacity(z.rows());
        for r in 0..z.rows() {
            let row = pert.row(r);
            let j = if unique && taken.iter().any(|t| !t) {
                let mut best = None;
                for (c, &x) in row.iter().enumerate() {
                    if !taken[c] && best.is_none_or(|b: usize| x > row[b]) {
                        best = Some(c);
                    }
                }
                best.expect("a free column")
            } else {
                argmax(row)
            };
            taken[j] = true;
            hard.set(r, j, 1.0);
            idx.push(j);
        }
        let ng = self.ng(logits.0);
        let v = self.push(hard, Op::StraightThrough { logits: logits.0, pi: pi.clone(), inv_tau: 1.0 / tau }, ng);
        (v, pi, idx)
    }

    /// Euclidean norm of each row, `[r × c] → [r × 1]`. The subgradient at a
    /// zero row is zero.
    pub fn row_norms(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let v = Tensor::from_vec(x.rows(), 1, (0..x.rows()).map(|r| x.row(r).iter().map(|z| z * z).sum::<f64>().sqrt()).collect());
        let ng = self.ng(a.0);
        self.push(v, Op::RowNorms(a.0), ng)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        let ng = self.ng(a.0);
        self.push(v, Op::SumAll(a.0), ng)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Sum over rows: `[r × c] → [1 × c]`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut v = Tensor::zeros(1, x.cols());
        for r in 0..x.rows() {
            for (d, s) in v.row_mut(0).iter_mut().zip(x.row(r)) {
                *d += s;
            }
        }
        let ng = self.ng(a.0);
        self.push(v, Op::SumRows(a.0), ng)
    }

    /// Sum over columns: `[r × c] → [r × 1]`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let v = Tensor::from_vec(x.rows(), 1, (0..x.rows()).map(|r| x.row(r).iter().sum()).collect());
        let ng = self.ng(a.0);
        self.push(v, Op::SumCols(a.0), ng)
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, out: Var) -> Gradients {
        assert_eq!(self.shape(out), (1, 1), "backward needs a scalar output");
        self.backward_with(out, Tensor::scalar(1.0))
    }

    /// Reverse sweep seeded with an arbitrary cotangent for `out`.
    pub fn backward_with(&self, out: Var, seed: Tensor) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        assert_eq!(seed.shape(), self.shape(out));
        grads[out.0] = Some(seed);
        for i in (0..=out.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads, params: self.params.clone() }
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |j: usize| -> &Tensor { &self.nodes[j].value };
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Input | Op::Param => {}
            Op::MatMul(a, b) => {
                if self.ng(*a) {
                    let acc = slot(grads, *a, val(*a).shape());
                    gemm(1.0, g, false, val(*b), true, 1.0, acc);
                }
                if self.ng(*b) {
                    let acc = slot(grads, *b, val(*b).shape());
                    gemm(1.0, val(*a), true, g, false, 1.0, acc);
                }
            }
            Op::MatMulT(a, b) => {
                // C = A Bᵀ: dA = G B, dB = Gᵀ A
                if self.ng(*a) {
                    let acc = slot(grads, *a, val(*a).shape());
                    gemm(1.0, g, false, val(*b), false, 1.0, acc);
                }
                if self.ng(*b) {
                    let acc = slot(grads, *b, val(*b).shape());
                    gemm(1.0, g, true, val(*a), false, 1.0, acc);
                }
            }
            Op::Add(a, b) => {
                add_into(grads, *a, self.ng(*a), g);
                add_into(grads, *b, self.ng(*b), g);
            }
            Op::Sub(a, b) => {
                add_into(grads, *a, self.ng(*a), g);
                if self.ng(*b) {
                    let acc = slot(grads, *b, g.shape());
                    for (d, s) in acc.data_mut().iter_mut().zip(g.data()) {
                        *d -= s;
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    let gb = g.zip_map(val(*b), |x, y| x * y);
                    add_into(grads, *a, true, &gb);
                }
                if self.ng(*b) {
                    let ga = g.zip_map(val(*a), |x, y| x * y);
                    add_into(grads, *b, true, &ga);
                }
            }
            Op::AddRow(a, r) => {
                add_into(grads, *a, self.ng(*a), g);
                if self.ng(*r) {
                    let acc = slot(grads, *r, (1, g.cols()));
                    for row in 0..g.rows() {
                        for (d, s) in acc.data_mut().iter_mut().zip(g.row(row)) {
                            *d += s;
                        }
                    }
                }
            }
            Op::MulRow(a, r) => {
                let rv = val(*r);
                if self.ng(*a) {
                    let mut ga = g.clone();
                    for row in 0..ga.rows() {
                        for (d, s) in ga.row_mut(row).iter_mut().zip(rv.data()) {
                            *d *= s;
                        }
                    }
                    add_into(grads, *a, true, &ga);
                }
                if self.ng(*r) {
                    let av = val(*a);
                    let acc = slot(grads, *r, (1, g.cols()));
                    for row in 0..g.rows() {
                        for ((d, s), x) in acc.data_mut().iter_mut().zip(g.row(row)).zip(av.row(row)) {
                            *d += s * x;
                        }
                    }
                }
            }
            Op::MulCol(a, c) => {
                let cv = val(*c);
                if self.ng(*a) {
                    let mut ga = g.clone();
                    for row in 0..ga.rows() {
                        let s = cv.data()[row];
                        for d in ga.row_mut(row) {
                            *d *= s;
                        }
                    }
                    add_into(grads, *a, true, &ga);
                }
                if self.ng(*c) {
                    let av = val(*a);
                    let acc = slot(grads, *c, cv.shape());
                    for row in 0..g.rows() {
                        acc.data_mut()[row] += g.row(row).iter().zip(av.row(row)).map(|(x, y)| x * y).sum::<f64>();
                    }
                }
            }
            Op::ScaleVar(a, s) => {
                let sv = val(*s).item();
                if self.ng(*a) {
                    add_into(grads, *a, true, &g.map(|x| x * sv));
                }
                if self.ng(*s) {
                    let d: f64 = g.data().iter().zip(val(*a).data()).map(|(x, y)| x * y).sum();
                    slot(grads, *s, (1, 1)).data_mut()[0] += d;
                }
            }
            Op::Scale(a, s) => add_into(grads, *a, self.ng(*a), &g.map(|x| x * s)),
            Op::AddConst(a) | Op::Reshape(a) => {
                if self.ng(*a) {
                    let shape = val(*a).shape();
                    let acc = slot(grads, *a, shape);
                    for (d, s) in acc.data_mut().iter_mut().zip(g.data()) {
                        *d += s;
                    }
                }
            }
            Op::LeakyRelu(a, slope) => {
                let x = val(*a);
                add_into(grads, *a, self.ng(*a), &g.zip_map(x, |gg, xx| if xx > 0.0 { gg } else { gg * slope }));
            }
            Op::Sigmoid(a) => add_into(grads, *a, self.ng(*a), &g.zip_map(out, |gg, y| gg * y * (1.0 - y))),
            Op::Tanh(a) => add_into(grads, *a, self.ng(*a), &g.zip_map(out, |gg, y| gg * (1.0 - y * y))),
            Op::Exp(a) => add_into(grads, *a, self.ng(*a), &g.zip_map(out, |gg, y| gg * y)),
            Op::Log(a) => add_into(grads, *a, self.ng(*a), &g.zip_map(val(*a), |gg, x| gg / x)),
            Op::Cos(a) => add_into(grads, *a, self.ng(*a), &g.zip_map(val(*a), |gg, x| -gg * x.sin())),
            Op::Square(a) => add_into(grads, *a, self.ng(*a), &g.zip_map(val(*a), |gg, x| 2.0 * gg * x)),
            Op::Sqrt(a) => add_into(grads, *a, self.ng(*a), &g.zip_map(out, |gg, y| 0.5 * gg / y)),
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                add_into(
                    grads,
                    *a,
                    self.ng(*a),
                    &g.zip_map(val(*a), |gg, x| if x > lo && x < hi { gg } else { 0.0 }),
                );
            }
            Op::Huber(a, delta) => {
                let d = *delta;
                add_into(grads, *a, self.ng(*a), &g.zip_map(val(*a), |gg, x| gg * x.clamp(-d, d)));
            }
            Op::SoftmaxRows(a) => {
                if self.ng(*a) {
                    let mut ga = Tensor::zeros(g.rows(), g.cols());
                    for r in 0..g.rows() {
                        let p = out.row(r);
                        let gr = g.row(r);
                        let dot: f64 = p.iter().zip(gr).map(|(x, y)| x * y).sum();
                        for ((d, &pp), &gg) in ga.row_mut(r).iter_mut().zip(p).zip(gr) {
                            *d = pp * (gg - dot);
                        }
                    }
                    add_into(grads, *a, true, &ga);
                }
            }
            Op::LogSoftmaxRows(a) => {
                if self.ng(*a) {
                    let mut ga = Tensor::zeros(g.rows(), g.cols());
                    for r in 0..g.rows() {
                        let gr = g.row(r);
                        let s: f64 = gr.iter().sum();
                        for ((d, &ls), &gg) in ga.row_mut(r).iter_mut().zip(out.row(r)).zip(gr) {
                            *d = gg - ls.exp() * s;
                        }
                    }
                    add_into(grads, *a, true, &ga);
                }
            }
            Op::LayerNorm { a, inv_std } => {
                if self.ng(*a) {
                    let n = g.cols() as f64;
                    let mut ga = Tensor::zeros(g.rows(), g.cols());
                    for r in 0..g.rows() {
                        let y = out.row(r);
                        let gr = g.row(r);
                        let mg = gr.iter().sum::<f64>() / n;
                        let mgy = gr.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / n;
                        for ((d, &gg), &yy) in ga.row_mut(r).iter_mut().zip(gr).zip(y) {
                            *d = inv_std[r] * (gg - mg - yy * mgy);
                        }
                    }
                    add_into(grads, *a, true, &ga);
                }
            }
            Op::L2NormalizeRows { a, norms, eps } => {
                if self.ng(*a) {
                    let mut ga = Tensor::zeros(g.rows(), g.cols());
                    for r in 0..g.rows() {
                        let y = out.row(r);
                        let gr = g.row(r);
                        if norms[r] > *eps {
                            let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                            for ((d, &gg), &yy) in ga.row_mut(r).iter_mut().zip(gr).zip(y) {
                                *d = (gg - yy * dot) / norms[r];
                            }
                        } else {
                            for (d, &gg) in ga.row_mut(r).iter_mut().zip(gr) {
                                *d = gg / eps;
                            }
                        }
                    }
                    add_into(grads, *a, true, &ga);
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let c = val(p).cols();
                    if self.ng(p) {
                        let acc = slot(grads, p, val(p).shape());
                        for r in 0..g.rows() {
                            for (d, s) in acc.row_mut(r).iter_mut().zip(&g.row(r)[off..off + c]) {
                                *d += s;
                            }
                        }
                    }
                    off += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = val(p).len();
                    if self.ng(p) {
                        let acc = slot(grads, p, val(p).shape());
                        for (d, s) in acc.data_mut().iter_mut().zip(&g.data()[off..off + n]) {
                            *d += s;
                        }
                    }
                    off += n;
                }
            }
            Op::SliceCols(a, start) => {
                if self.ng(*a) {
                    let acc = slot(grads, *a, val(*a).shape());
                    for r in 0..g.rows() {
                        for (d, s) in acc.row_mut(r)[*start..*start + g.cols()].iter_mut().zip(g.row(r)) {
                            *d += s;
                        }
                    }
                }
            }
            Op::SliceRows(a, start) => {
                if self.ng(*a) {
                    let cols = g.cols();
                    let acc = slot(grads, *a, val(*a).shape());
                    for (d, s) in acc.data_mut()[start * cols..start * cols + g.len()].iter_mut().zip(g.data()) {
                        *d += s;
                    }
                }
            }
            Op::Transpose(a) => add_into(grads, *a, self.ng(*a), &g.transpose()),
            Op::GatherRows(a, idx) => {
                if self.ng(*a) {
                    let acc = slot(grads, *a, val(*a).shape());
                    for (i, &j) in idx.iter().enumerate() {
                        for (d, s) in acc.row_mut(j).iter_mut().zip(g.row(i)) {
                            *d += s;
                        }
                    }
                }
            }
            Op::SegmentMax { a, argmax } => {
                if self.ng(*a) {
                    let d = g.cols();
                    let acc = slot(grads, *a, val(*a).shape());
                    for (k, am) in argmax.iter().enumerate() {
                        if let Some(r) = am {
                            let (s, c) = (k / d, k % d);
                            acc.data_mut()[r * d + c] += g.get(s, c);
                        }
                    }
                }
            }
            Op::StraightThrough { logits, pi, inv_tau } => {
                if self.ng(*logits) {
                    let mut ga = Tensor::zeros(g.rows(), g.cols());
                    for r in 0..g.rows() {
                        let p = pi.row(r);
                        let gr = g.row(r);
                        let dot: f64 = p.iter().zip(gr).map(|(x, y)| x * y).sum();
                        for ((d, &pp), &gg) in ga.row_mut(r).iter_mut().zip(p).zip(gr) {
                            *d = inv_tau * pp * (gg - dot);
                        }
                    }
                    add_into(grads, *logits, true, &ga);
                }
            }
            Op::SumAll(a) => {
                if self.ng(*a) {
                    let s = g.item();
                    let acc = slot(grads, *a, val(*a).shape());
                    for d in acc.data_mut() {
                        *d += s;
                    }
                }
            }
            Op::SumRows(a) => {
                if self.ng(*a) {
                    let acc = slot(grads, *a, val(*a).shape());
                    for r in 0..acc.rows() {
                        for (d, s) in acc.row_mut(r).iter_mut().zip(g.data()) {
                            *d += s;
                        }
                    }
                }
            }
            Op::RowNorms(a) => {
                if self.ng(*a) {
                    let x = val(*a);
                    let mut ga = Tensor::zeros(x.rows(), x.cols());
                    for r in 0..x.rows() {
                        let n = out.get(r, 0);
                        if n > 0.0 {
                            let s = g.get(r, 0) / n;
                            for (d, &z) in ga.row_mut(r).iter_mut().zip(x.row(r)) {
                                *d = s * z;
                            }
                        }
                    }
                    add_into(grads, *a, true, &ga);
                }
            }
            Op::SumCols(a) => {
                if self.ng(*a) {
                    let acc = slot(grads, *a, val(*a).shape());
                    for r in 0..acc.rows() {
                        let s = g.data()[r];
                        for d in acc.row_mut(r) {
                            *d += s;
                        }
                    }
                }
            }
        }
    }
}

pub fn huber(x: f64, delta: f64) -> f64 {
    let a = x.abs();
    if a <= delta {
        0.5 * x * x
    } else {
        delta * (a - 0.5 * delta)
    }
}

fn slot(grads: &mut [Option<Tensor>], j: usize, shape: (usize, usize)) -> &mut Tensor {
    grads[j].get_or_insert_with(|| Tensor::zeros(shape.0, shape.1))
}

fn add_into(grads: &mut [Option<Tensor>], j: usize, needs: bool, g: &Tensor) {
    if !needs {
        return;
    }
    match &mut grads[j] {
        Some(acc) => acc.add_assign(g),
        None => grads[j] = Some(g.clone()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central differences of `f` at `x`, one coordinate at a time.
    fn numeric(x: &Tensor, f: impl Fn(&Tensor) -> f64) -> Tensor {
        let h = 1e-6;
        let mut out = Tensor::zeros(x.rows(), x.cols());
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            out.data_mut()[i] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        out
    }

    fn check(x: Tensor, build: impl Fn(&mut Graph, Var) -> Var) {
        let mut g = Graph::new();
        let v = g.leaf(x.clone());
        let o = build(&mut g, v);
        let grads = g.backward(o);
        let analytic = grads.wrt(v).cloned().unwrap_or_else(|| Tensor::zeros(x.rows(), x.cols()));
        let num = numeric(&x, |t| {
            let mut g = Graph::new();
            let v = g.leaf(t.clone());
            let o = build(&mut g, v);
            g.value(o).item()
        });
        let err = analytic.zip_map(&num, |a, b| (a - b).abs()).max_abs();
        let scale = analytic.max_abs().max(num.max_abs()).max(1e-8);
        assert!(err / scale < 1e-6, "rel err {} analytic {:?} numeric {:?}", err / scale, analytic, num);
    }

    fn sample(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        let data = (0..rows * cols)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect();
        Tensor::from_vec(rows, cols, data)
    }

    #[test]
    fn elementwise_and_reduction_ops() {
        let w = sample(3, 4, 9);
        check(sample(3, 4, 1), |g, x| {
            let wv = g.input(w.clone());
            let a = g.tanh(x);
            let b = g.sigmoid(x);
            let c = g.mul(a, b);
            let d = g.leaky_relu(c, 0.01);
            let e = g.mul(d, wv);
            let f = g.exp(e);
            let h = g.huber(f, 1.0);
            let l = g.cos(h);
            g.sum_all(l)
        });
    }

    #[test]
    fn matmul_and_broadcast_ops() {
        let b = sample(4, 5, 2);
        let r = sample(1, 5, 3);
        check(sample(3, 4, 4), |g, x| {
            let bv = g.leaf(b.clone());
            let rv = g.leaf(r.clone());
            let m = g.matmul(x, bv);
            let m = g.add_row(m, rv);
            let m = g.mul_row(m, rv);
            let t = g.matmul_t(m, m);
            let s = g.square(t);
            g.sum_all(s)
        });
    }

    #[test]
    fn softmax_layernorm_normalize() {
        let w = sample(2, 6, 5);
        check(sample(2, 6, 6), |g, x| {
            let wv = g.input(w.clone());
            let s = g.softmax_rows(x);
            let ls = g.log_softmax_rows(x);
            let n = g.layer_norm(x, 1e-5);
            let (u, _) = g.l2_normalize_rows(x, 1e-12);
            let a = g.add(s, ls);
            let a = g.add(a, n);
            let a = g.add(a, u);
            let a = g.mul(a, wv);
            g.sum_all(a)
        });
    }

    #[test]
    fn masked_softmax_zeroes_masked_columns() {
        let x = Tensor::from_vec(2, 3, vec![1.0, 2.0, 1e9, 0.0, 0.0, 0.0]);
        let p = softmax_rows_masked(&x, Some(&[true, true, false]));
        assert_eq!(p.get(0, 2), 0.0);
        assert!((p.get(0, 0) + p.get(0, 1) - 1.0).abs() < 1e-15);
        let none = softmax_rows_masked(&x, Some(&[false, false, false]));
        assert_eq!(none.sum(), 0.0);
    }

    #[test]
    fn structural_ops() {
        let w = sample(4, 3, 7);
        check(sample(4, 3, 8), |g, x| {
            let wv = g.input(w.clone());
            let a = g.slice_cols(x, 1, 2);
            let b = g.slice_rows(x, 0, 2);
            let bt = g.transpose(b);
            let c = g.concat_cols(&[a, x]);
            let d = g.gather_rows(c, &[3, 0, 0]);
            let sm = g.segment_max(x, &[(0, 2), (2, 2)], &[true, true, false, true]);
            let e = g.sum_rows(d);
            let f = g.sum_cols(bt);
            let h = g.concat_rows(&[sm, wv]);
            let k = g.reshape(h, 3, 6);
            let s1 = g.sum_all(e);
            let s2 = g.sum_all(f);
            let s3 = g.square(k);
            let s3 = g.sum_all(s3);
            let t = g.add(s1, s2);
            g.add(t, s3)
        });
    }

    #[test]
    fn straight_through_uses_softmax_jacobian() {
        let z = Tensor::from_vec(2, 3, vec![0.3, -0.2, 0.9, 0.0, 0.5, 0.1]);
        let w = sample(2, 3, 11);
        let mut g = Graph::new();
        let zv = g.leaf(z.clone());
        let (y, pi) = g.straight_through(zv, 0.7, None);
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
        let wv = g.input(w.clone());
        let l = g.mul(y, wv);
        let l = g.sum_all(l);
        let analytic = g.backward(l).wrt(zv).unwrap().clone();
        // Linear surrogate Σ w ⊙ softmax(z/τ) has the same gradient.
        let num = numeric(&z, |t| {
            let p = softmax_rows_masked(&t.map(|x| x / 0.7), None);
            p.zip_map(&w, |a, b| a * b).sum()
        });
        assert!(analytic.zip_map(&num, |a, b| (a - b).abs()).max_abs() < 1e-8);
        assert!((pi.row(0).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn segment_max_tie_goes_to_lowest_index() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(3, 1, vec![2.0, 2.0, 1.0]));
        let m = g.segment_max(x, &[(0, 3)], &[true, true, true]);
        let s = g.sum_all(m);
        let gr = g.backward(s);
        assert_eq!(gr.wrt(x).unwrap().data(), &[1.0, 0.0, 0.0]);
    }
}
