//! Tape-based reverse-mode differentiation over [`Matrix`] values.
//!
//! Nodes are appended in evaluation order, so walking the tape backwards is a
//! reverse topological traversal. Gradients accumulate additively at fan-out.

use super::matrix::{matmul_acc, t_matmul_acc};
use super::{Matrix, Scalar};
use crate::error::{ensure, Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A contiguous block of rows `[start, start + len)` treated as one sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_SHARPNESS: f64 = 1.702;

enum Op<T> {
    Leaf,
    Constant,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    ScaleBy(Var, Var),
    Transpose(Var),
    ConcatCols(Vec<Var>),
    Sum(Var),
    Gelu(Var),
    RowSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Matrix<T>,
        rstd: Vec<T>,
    },
    RowL2Normalize {
        x: Var,
        norms: Vec<T>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    SegmentMean {
        x: Var,
        segments: Vec<Segment>,
    },
    Attention {
        qkv: Var,
        segments: Vec<Segment>,
        heads: usize,
        probs: Vec<Matrix<T>>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Matrix<T>,
    },
    ExpClamp {
        x: Var,
        lo: T,
        hi: T,
    },
    SmoothL1 {
        a: Var,
        b: Var,
        beta: T,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::MatMul(..) => "matmul",
            Op::MatMulT(..) => "matmul_t",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::ScaleBy(..) => "scale_by",
            Op::Transpose(..) => "transpose",
            Op::ConcatCols(..) => "concat_cols",
            Op::Sum(..) => "sum",
            Op::Gelu(..) => "gelu",
            Op::RowSoftmax(..) => "row_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::RowL2Normalize { .. } => "row_l2_normalize",
            Op::Gather { .. } => "gather",
            Op::SegmentMean { .. } => "segment_mean",
            Op::Attention { .. } => "attention",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::ExpClamp { .. } => "exp_clamp",
            Op::SmoothL1 { .. } => "smooth_l1",
        }
    }
}

struct Node<T> {
    value: Matrix<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Matrix<T>>>,
    shapes: Vec<(usize, usize)>,
    leaves: Vec<Var>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to `v`; zeros if the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Matrix<T> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Matrix::zeros(r, c)
            }
        }
    }

    pub fn get(&self, v: Var) -> Option<&Matrix<T>> {
        self.grads[v.0].as_ref()
    }

    /// One gradient per leaf, in leaf creation order.
    pub fn leaves(&self) -> Vec<(Var, Matrix<T>)> {
        self.leaves.iter().map(|&v| (v, self.wrt(v))).collect()
    }
}

fn softmax_row_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
    let mut total = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total = total + *x;
    }
    for x in row.iter_mut() {
        *x = *x / total;
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn block<T: Scalar>(m: &Matrix<T>, rows: Segment, col0: usize, width: usize) -> Matrix<T> {
    Matrix::from_fn(rows.len, width, |r, c| m.get(rows.start + r, col0 + c))
}

fn add_block<T: Scalar>(m: &mut Matrix<T>, rows: Segment, col0: usize, src: &Matrix<T>) {
    for r in 0..src.rows() {
        for c in 0..src.cols() {
            let cur = m.get(rows.start + r, col0 + c);
            m.set(rows.start + r, col0 + c, cur + src.get(r, c));
        }
    }
}

fn check_segments(segments: &[Segment], rows: usize) -> Result<()> {
    let mut next = 0;
    for s in segments {
        ensure!(s.len > 0, "empty segment at row {}", s.start);
        ensure!(s.start >= next, "segments overlap or are unordered at row {}", s.start);
        next = s.start + s.len;
    }
    ensure!(next <= rows, "segment end {next} exceeds {rows} rows");
    Ok(())
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>, needs_grad: bool) -> Var {
        debug_assert!(value.is_finite(), "non-finite output from {}", op.name());
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A differentiable input (parameter or probe point).
    pub fn leaf(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A value treated as fixed by the backward pass.
    pub fn constant(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul_t(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::MatMulT(a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Sub(a, b), ng))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    /// Adds the `1 × c` row `bias` to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (rows, cols) = self.shape(a);
        ensure!(
            self.shape(bias) == (1, cols),
            "add_row bias shape {:?}, expected (1, {cols})",
            self.shape(bias)
        );
        let mut out = self.value(a).clone();
        let b = self.value(bias).row(0).to_vec();
        for r in 0..rows {
            for (x, &y) in out.row_mut(r).iter_mut().zip(&b) {
                *x = *x + y;
            }
        }
        let ng = self.ng(a) || self.ng(bias);
        Ok(self.push(out, Op::AddRow(a, bias), ng))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).scale(s);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, s), ng)
    }

    /// Multiplies `a` by the value of the `1 × 1` node `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        ensure!(self.shape(s) == (1, 1), "scale_by needs a 1x1 factor");
        let out = self.value(a).scale(self.value(s).item());
        let ng = self.ng(a) || self.ng(s);
        Ok(self.push(out, Op::ScaleBy(a, s), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        let ng = self.ng(a);
        self.push(out, Op::Transpose(a), ng)
    }

    /// Side-by-side concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        ensure!(!parts.is_empty(), "concat_cols needs at least one input");
        let rows = self.shape(parts[0]).0;
        ensure!(
            parts.iter().all(|&p| self.shape(p).0 == rows),
            "concat_cols inputs have different row counts"
        );
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let out = Matrix::from_vec(rows, cols, data)?;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Matrix::scalar(self.value(a).sum());
        let ng = self.ng(a);
        self.push(out, Op::Sum(a), ng)
    }

    /// `x · σ(1.702 x)`.
    pub fn gelu(&mut self, a: Var) -> Var {
        let k = T::of(GELU_SHARPNESS);
        let out = self.value(a).map(|x| x * sigmoid(k * x));
        let ng = self.ng(a);
        self.push(out, Op::Gelu(a), ng)
    }

    /// Max-subtracted softmax along each row.
    pub fn row_softmax(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for r in 0..out.rows() {
            softmax_row_in_place(out.row_mut(r));
        }
        let ng = self.ng(a);
        self.push(out, Op::RowSoftmax(a), ng)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (rows, cols) = self.shape(x);
        ensure!(
            self.shape(gain) == (1, cols) && self.shape(bias) == (1, cols),
            "layer_norm affine shapes must be (1, {cols})"
        );
        let xv = self.value(x);
        let g = self.value(gain).row(0);
        let b = self.value(bias).row(0);
        let n = T::of(cols as f64);
        let mut xhat = Matrix::zeros(rows, cols);
        let mut out = Matrix::zeros(rows, cols);
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rs = T::one() / (var + T::of(LAYER_NORM_EPS)).sqrt();
            rstd.push(rs);
            for c in 0..cols {
                let h = (row[c] - mean) * rs;
                xhat.set(r, c, h);
                out.set(r, c, h * g[c] + b[c]);
            }
        }
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    /// Divides each row by its L2 norm.
    pub fn row_l2_normalize(&mut self, x: Var) -> Result<Var> {
        let mut out = self.value(x).clone();
        let mut norms = Vec::with_capacity(out.rows());
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            ensure!(norm > T::zero(), "row {r} has zero norm and cannot be normalized");
            row.iter_mut().for_each(|v| *v = *v / norm);
            norms.push(norm);
        }
        let ng = self.ng(x);
        Ok(self.push(out, Op::RowL2Normalize { x, norms }, ng))
    }

    /// Rows of `table` picked by `ids` (embedding lookup, row selection).
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let rows = self.shape(table).0;
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::Contract(format!(
                "gather index {bad} out of range for {rows} rows"
            )));
        }
        let out = self.value(table).select_rows(ids);
        let ng = self.ng(table);
        Ok(self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    /// Mean of the rows in each segment; one output row per segment.
    pub fn segment_mean(&mut self, x: Var, segments: &[Segment]) -> Result<Var> {
        let (rows, cols) = self.shape(x);
        check_segments(segments, rows)?;
        let xv = self.value(x);
        let mut out = Matrix::zeros(segments.len(), cols);
        for (i, s) in segments.iter().enumerate() {
            let inv = T::one() / T::of(s.len as f64);
            for r in s.start..s.start + s.len {
                for (o, &v) in out.row_mut(i).iter_mut().zip(xv.row(r)) {
                    *o = *o + v * inv;
                }
            }
        }
        let ng = self.ng(x);
        Ok(self.push(
            out,
            Op::SegmentMean {
                x,
                segments: segments.to_vec(),
            },
            ng,
        ))
    }

    /// Bidirectional multi-head attention within each segment.
    ///
    /// `qkv` is `N × 3d` with query, key and value blocks side by side; the
    /// output is `N × d` with heads concatenated along columns.
    pub fn attention(&mut self, qkv: Var, segments: &[Segment], heads: usize) -> Result<Var> {
        let (rows, cols) = self.shape(qkv);
        ensure!(cols % 3 == 0, "attention input width {cols} not divisible by 3");
        let d = cols / 3;
        ensure!(heads > 0 && d % heads == 0, "d={d} not divisible by {heads} heads");
        check_segments(segments, rows)?;
        let dh = d / heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let xv = self.value(qkv);
        let mut out = Matrix::zeros(rows, d);
        let mut probs = Vec::with_capacity(segments.len() * heads);
        for &seg in segments {
            for h in 0..heads {
                let q = block(xv, seg, h * dh, dh);
                let k = block(xv, seg, d + h * dh, dh);
                let v = block(xv, seg, 2 * d + h * dh, dh);
                let mut p = q.matmul_t(&k)?.scale(scale);
                for r in 0..p.rows() {
                    softmax_row_in_place(p.row_mut(r));
                }
                let o = p.matmul(&v)?;
                add_block(&mut out, seg, h * dh, &o);
                probs.push(p);
            }
        }
        let ng = self.ng(qkv);
        Ok(self.push(
            out,
            Op::Attention {
                qkv,
                segments: segments.to_vec(),
                heads,
                probs,
            },
            ng,
        ))
    }

    /// Mean over rows of `-log softmax(logits[i])[labels[i]]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (rows, cols) = self.shape(logits);
        ensure!(labels.len() == rows, "{} labels for {rows} rows", labels.len());
        ensure!(rows > 0, "cross_entropy on empty batch");
        if let Some(&bad) = labels.iter().find(|&&l| l >= cols) {
            return Err(Error::Contract(format!(
                "label {bad} out of range for {cols} classes"
            )));
        }
        let mut probs = self.value(logits).clone();
        let mut total = T::zero();
        for r in 0..rows {
            let row = probs.row_mut(r);
            let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
            let lse = row.iter().map(|&x| (x - max).exp()).sum::<T>().ln() + max;
            total = total + (lse - row[labels[r]]);
            row.iter_mut().for_each(|x| *x = (*x - lse).exp());
        }
        let out = Matrix::scalar(total / T::of(rows as f64));
        let ng = self.ng(logits);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            ng,
        ))
    }

    /// `clamp(exp(x), lo, hi)` for a `1 × 1` node; zero gradient outside the clamp.
    pub fn exp_clamp(&mut self, x: Var, lo: T, hi: T) -> Result<Var> {
        ensure!(self.shape(x) == (1, 1), "exp_clamp needs a 1x1 input");
        let out = Matrix::scalar(self.value(x).item().exp().max(lo).min(hi));
        let ng = self.ng(x);
        Ok(self.push(out, Op::ExpClamp { x, lo, hi }, ng))
    }

    /// Mean elementwise smooth-L1 (Huber with threshold `beta`) distance.
    pub fn smooth_l1(&mut self, a: Var, b: Var, beta: T) -> Result<Var> {
        ensure!(beta > T::zero(), "smooth_l1 beta must be positive");
        let diff = self.value(a).sub(self.value(b))?;
        let half = T::of(0.5);
        let total: T = diff
            .data()
            .iter()
            .map(|&d| {
                if d.abs() < beta {
                    half * d * d / beta
                } else {
                    d.abs() - half * beta
                }
            })
            .sum();
        let out = Matrix::scalar(total / T::of(diff.len().max(1) as f64));
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::SmoothL1 { a, b, beta }, ng))
    }

    /// Gradients of the scalar `loss` with respect to every node on the tape.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        ensure!(
            self.shape(loss) == (1, 1),
            "backward needs a scalar loss, got shape {:?}",
            self.shape(loss)
        );
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Matrix<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::scalar(T::one()));

        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }

        let shapes = self.nodes.iter().map(|n| n.value.shape()).collect();
        let leaves = self
            .nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.op, Op::Leaf))
            .map(|(i, _)| Var(i))
            .collect();
        Ok(Gradients {
            grads,
            shapes,
            leaves,
        })
    }

    fn propagate(
        &self,
        node: &Node<T>,
        g: &Matrix<T>,
        grads: &mut [Option<Matrix<T>>],
    ) -> Result<()> {
        let mut acc = |v: Var, delta: Matrix<T>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    acc(*a, g.matmul_t(bv)?);
                }
                if self.ng(*b) {
                    let mut db = Matrix::zeros(bv.rows(), bv.cols());
                    t_matmul_acc(av, g, &mut db);
                    acc(*b, db);
                }
            }
            Op::MatMulT(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    let mut da = Matrix::zeros(av.rows(), av.cols());
                    matmul_acc(g, bv, &mut da);
                    acc(*a, da);
                }
                if self.ng(*b) {
                    let mut db = Matrix::zeros(bv.rows(), bv.cols());
                    t_matmul_acc(g, av, &mut db);
                    acc(*b, db);
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.scale(-T::one()));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, g.zip_map(bv, |x, y| x * y)?);
                acc(*b, g.zip_map(av, |x, y| x * y)?);
            }
            Op::AddRow(a, bias) => {
                acc(*a, g.clone());
                let mut col_sum = vec![T::zero(); g.cols()];
                for r in 0..g.rows() {
                    for (s, &q) in col_sum.iter_mut().zip(g.row(r)) {
                        *s = *s + q;
                    }
                }
                acc(*bias, Matrix::from_vec(1, g.cols(), col_sum)?);
            }
            Op::Scale(a, s) => acc(*a, g.scale(*s)),
            Op::ScaleBy(a, s) => {
                let sv = self.value(*s).item();
                acc(*a, g.scale(sv));
                let ds: T = g
                    .data()
                    .iter()
                    .zip(self.value(*a).data())
                    .map(|(&x, &y)| x * y)
                    .sum();
                acc(*s, Matrix::scalar(ds));
            }
            Op::Transpose(a) => acc(*a, g.transpose()),
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let (rows, cols) = self.shape(p);
                    acc(p, Matrix::from_fn(rows, cols, |r, c| g.get(r, start + c)));
                    start += cols;
                }
            }
            Op::Sum(a) => {
                let (r, c) = self.shape(*a);
                acc(*a, Matrix::filled(r, c, g.item()));
            }
            Op::Gelu(a) => {
                let k = T::of(GELU_SHARPNESS);
                let dx = self.value(*a).zip_map(g, |x, gy| {
                    let s = sigmoid(k * x);
                    gy * (s + k * x * s * (T::one() - s))
                })?;
                acc(*a, dx);
            }
            Op::RowSoftmax(a) => {
                let y = &node.value;
                let mut dx = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let dot: T = y.row(r).iter().zip(g.row(r)).map(|(&p, &q)| p * q).sum();
                    for ((o, &p), &q) in dx.row_mut(r).iter_mut().zip(y.row(r)).zip(g.row(r)) {
                        *o = p * (q - dot);
                    }
                }
                acc(*a, dx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let (rows, cols) = xhat.shape();
                let gv = self.value(*gain).row(0);
                let mut dgain = vec![T::zero(); cols];
                let mut dbias = vec![T::zero(); cols];
                let mut dx = Matrix::zeros(rows, cols);
                let n = T::of(cols as f64);
                for r in 0..rows {
                    let (gr, hr) = (g.row(r), xhat.row(r));
                    let mut mean_d = T::zero();
                    let mut mean_dh = T::zero();
                    for c in 0..cols {
                        dgain[c] = dgain[c] + gr[c] * hr[c];
                        dbias[c] = dbias[c] + gr[c];
                        let dh = gr[c] * gv[c];
                        mean_d = mean_d + dh;
                        mean_dh = mean_dh + dh * hr[c];
                    }
                    mean_d = mean_d / n;
                    mean_dh = mean_dh / n;
                    for c in 0..cols {
                        let dh = gr[c] * gv[c];
                        dx.set(r, c, rstd[r] * (dh - mean_d - hr[c] * mean_dh));
                    }
                }
                acc(*x, dx);
                acc(*gain, Matrix::from_vec(1, cols, dgain)?);
                acc(*bias, Matrix::from_vec(1, cols, dbias)?);
            }
            Op::RowL2Normalize { x, norms } => {
                let y = &node.value;
                let mut dx = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let dot: T = y.row(r).iter().zip(g.row(r)).map(|(&p, &q)| p * q).sum();
                    for ((o, &p), &q) in dx.row_mut(r).iter_mut().zip(y.row(r)).zip(g.row(r)) {
                        *o = (q - p * dot) / norms[r];
                    }
                }
                acc(*x, dx);
            }
            Op::Gather { table, ids } => {
                let (r, c) = self.shape(*table);
                let mut dt = Matrix::zeros(r, c);
                for (i, &id) in ids.iter().enumerate() {
                    for (o, &q) in dt.row_mut(id).iter_mut().zip(g.row(i)) {
                        *o = *o + q;
                    }
                }
                acc(*table, dt);
            }
            Op::SegmentMean { x, segments } => {
                let (r, c) = self.shape(*x);
                let mut dx = Matrix::zeros(r, c);
                for (i, s) in segments.iter().enumerate() {
                    let inv = T::one() / T::of(s.len as f64);
                    for row in s.start..s.start + s.len {
                        for (o, &q) in dx.row_mut(row).iter_mut().zip(g.row(i)) {
                            *o = *o + q * inv;
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::Attention {
                qkv,
                segments,
                heads,
                probs,
            } => {
                let xv = self.value(*qkv);
                let d = xv.cols() / 3;
                let dh = d / heads;
                let scale = T::one() / T::of(dh as f64).sqrt();
                let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                let mut p_iter = probs.iter();
                for &seg in segments {
                    for h in 0..*heads {
                        let p = p_iter.next().expect("one saved softmax per segment and head");
                        let q = block(xv, seg, h * dh, dh);
                        let k = block(xv, seg, d + h * dh, dh);
                        let v = block(xv, seg, 2 * d + h * dh, dh);
                        let d_out = block(g, seg, h * dh, dh);
                        let dv = p.t_matmul(&d_out)?;
                        let dp = d_out.matmul_t(&v)?;
                        let mut ds = Matrix::zeros(p.rows(), p.cols());
                        for r in 0..p.rows() {
                            let dot: T =
                                p.row(r).iter().zip(dp.row(r)).map(|(&a, &b)| a * b).sum();
                            for ((o, &pa), &pb) in
                                ds.row_mut(r).iter_mut().zip(p.row(r)).zip(dp.row(r))
                            {
                                *o = pa * (pb - dot) * scale;
                            }
                        }
                        add_block(&mut dx, seg, h * dh, &ds.matmul(&k)?);
                        add_block(&mut dx, seg, d + h * dh, &ds.t_matmul(&q)?);
                        add_block(&mut dx, seg, 2 * d + h * dh, &dv);
                    }
                }
                acc(*qkv, dx);
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let rows = probs.rows();
                let w = g.item() / T::of(rows as f64);
                let mut dl = probs.scale(w);
                for (r, &l) in labels.iter().enumerate() {
                    let cur = dl.get(r, l);
                    dl.set(r, l, cur - w);
                }
                acc(*logits, dl);
            }
            Op::ExpClamp { x, lo, hi } => {
                let v = self.value(*x).item().exp();
                let d = if v >= *lo && v <= *hi {
                    node.value.item() * g.item()
                } else {
                    T::zero()
                };
                acc(*x, Matrix::scalar(d));
            }
            Op::SmoothL1 { a, b, beta } => {
                let diff = self.value(*a).sub(self.value(*b))?;
                let w = g.item() / T::of(diff.len().max(1) as f64);
                let da = diff.map(|d| {
                    if d.abs() < *beta {
                        w * d / *beta
                    } else {
                        w * d.signum()
                    }
                });
                acc(*b, da.scale(-T::one()));
                acc(*a, da);
            }
        }
        Ok(())
    }
}
