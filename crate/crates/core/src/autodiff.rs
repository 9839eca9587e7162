//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends one node holding its output value plus whatever it
//! needs for the backward pass. [`Tape::backward`] walks the nodes in reverse
//! exactly once. A tape supports a single backward pass; build a fresh tape for
//! the next step.

use std::cell::Cell;
use std::sync::Arc;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sparse::SparseMatrix;
use crate::tensor::{gemm, Scalar, Tensor, View, ViewMut};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// GeLU variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GeluKind {
    /// `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`
    #[default]
    Tanh,
    /// `0.5 x (1 + erf(x / sqrt 2))`
    Erf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Activation {
    Gelu(GeluKind),
    Relu,
    Tanh,
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Propagate { a: Arc<SparseMatrix<T>>, x: Var },
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Activation(Var, Activation),
    SoftmaxRows(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T> },
    Dropout { x: Var, mask: Vec<T> },
    ConcatCols(Vec<Var>),
    Transpose(Var),
    MeanRows(Var),
    SumRows(Var),
    Sum(Var),
    SegmentPool { x: Var, offsets: Arc<[usize]>, mean: bool },
    WeightedSum { weights: Var, parts: Vec<Var> },
    Attention(Box<AttentionSaved<T>>),
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<T> },
}

struct AttentionSaved<T> {
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    blocks: Arc<[usize]>,
    scale: T,
    /// Post-softmax weights, per head then per block, each block `nb x nb`.
    probs: Vec<T>,
    /// Inverted-dropout multipliers in the same layout as `probs`.
    keep: Option<Vec<T>>,
    /// Start of each block inside one head's slice of `probs`.
    block_starts: Vec<usize>,
    per_head: usize,
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Propagate { .. } => "propagate",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Activation(_, Activation::Gelu(_)) => "gelu",
            Op::Activation(_, Activation::Relu) => "relu",
            Op::Activation(_, Activation::Tanh) => "tanh",
            Op::SoftmaxRows(_) => "softmax_rows",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Dropout { .. } => "dropout",
            Op::ConcatCols(_) => "concat_cols",
            Op::Transpose(_) => "transpose",
            Op::MeanRows(_) => "mean_rows",
            Op::SumRows(_) => "sum_rows",
            Op::Sum(_) => "sum",
            Op::SegmentPool { .. } => "segment_pool",
            Op::WeightedSum { .. } => "weighted_sum",
            Op::Attention(_) => "attention",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

thread_local! {
    static BACKWARD_FAULT: Cell<Option<&'static str>> = const { Cell::new(None) };
}

/// Flip the sign of every gradient produced by the named op on this thread.
///
/// Only meant for mutation-testing the verification suite; pass `None` to
/// restore normal behavior.
#[doc(hidden)]
pub fn inject_backward_fault(op: Option<&'static str>) {
    BACKWARD_FAULT.with(|f| f.set(op));
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    ops_visited: usize,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }

    /// Number of recorded operations the reverse sweep processed.
    pub fn ops_visited(&self) -> usize {
        self.ops_visited
    }
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    backward_done: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), backward_done: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let ((n, k), (k2, m)) = (self.dims(a), self.dims(b));
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); n * m];
        gemm(
            T::one(),
            View::dense(self.value(a).data(), n, k),
            View::dense(self.value(b).data(), k, m),
            T::zero(),
            ViewMut::dense(&mut out, n, m),
        );
        Ok(self.push(Tensor::new(&[n, m], out)?, Op::MatMul(a, b), &[a, b]))
    }

    /// `a * x` for a constant sparse `a`.
    pub fn propagate_once(&mut self, a: &Arc<SparseMatrix<T>>, x: Var) -> Result<Var> {
        let (n, d) = self.dims(x);
        if a.cols() != n {
            return Err(Error::shape("propagate", &[a.rows(), a.cols()], self.shape(x)));
        }
        let mut out = vec![T::zero(); a.rows() * d];
        a.spmm_into(self.value(x).data(), d, &mut out);
        let value = Tensor::new(&[a.rows(), d], out)?;
        Ok(self.push(value, Op::Propagate { a: Arc::clone(a), x }, &[x]))
    }

    /// `a^k x` by `k` successive sparse products. `k = 0` returns `x` itself.
    pub fn propagate(&mut self, a: &Arc<SparseMatrix<T>>, x: Var, k: usize) -> Result<Var> {
        if a.rows() != a.cols() {
            return Err(Error::shape("propagate", &[a.rows(), a.cols()], self.shape(x)));
        }
        let mut cur = x;
        for _ in 0..k {
            cur = self.propagate_once(a, cur)?;
        }
        Ok(cur)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.dims(a) != self.dims(b) {
            return Err(Error::shape("add", self.shape(a), self.shape(b)));
        }
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(&shape, data)?, Op::Add(a, b), &[a, b]))
    }

    /// `x + 1 b` where `b` is a single row broadcast over the rows of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let ((n, d), (br, bd)) = (self.dims(x), self.dims(b));
        if br != 1 || bd != d {
            return Err(Error::shape("add_row", self.shape(x), self.shape(b)));
        }
        let bias = self.value(b).data();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(d) {
            for (v, &bv) in row.iter_mut().zip(bias) {
                *v += bv;
            }
        }
        Ok(self.push(Tensor::new(&[n, d], data)?, Op::AddRow(x, b), &[x, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.dims(a) != self.dims(b) {
            return Err(Error::shape("mul", self.shape(a), self.shape(b)));
        }
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(&shape, data)?, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let value = self.value(x).map(|v| v * s);
        self.push(value, Op::Scale(x, s), &[x])
    }

    fn activation(&mut self, x: Var, act: Activation) -> Var {
        let value = self.value(x).map(|v| activate(act, v));
        self.push(value, Op::Activation(x, act), &[x])
    }

    pub fn gelu(&mut self, x: Var, kind: GeluKind) -> Var {
        self.activation(x, Activation::Gelu(kind))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Relu)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Tanh)
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (n, m) = self.dims(x);
        if m == 0 {
            return Err(Error::shape("softmax_rows", self.shape(x), &[1]));
        }
        let input = self.value(x);
        if !input.all_finite() {
            return Err(Error::Numeric("softmax_rows received a non-finite input".into()));
        }
        let mut data = input.data().to_vec();
        data.chunks_mut(m).for_each(softmax_in_place);
        Ok(self.push(Tensor::new(&[n, m], data)?, Op::SoftmaxRows(x), &[x]))
    }

    /// Per-row normalization to zero mean and unit variance followed by
    /// `gamma * xhat + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (n, d) = self.dims(x);
        if self.dims(gamma) != (1, d) || self.dims(beta) != (1, d) {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let eps = T::from_f64(eps);
        let inv_d = T::one() / T::from_f64(d as f64);
        let input = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![T::zero(); n * d];
        let mut inv_std = Vec::with_capacity(n);
        let mut out = vec![T::zero(); n * d];
        for i in 0..n {
            let row = &input[i * d..(i + 1) * d];
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[i * d + j] = h;
                out[i * d + j] = g[j] * h + b[j];
            }
        }
        let value = Tensor::new(&[n, d], out)?;
        Ok(self.push(value, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, &[x, gamma, beta]))
    }

    /// Inverted dropout. Identity (no new node) when not training or `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, training: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout probability {p} outside [0, 1)")));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let keep_scale = T::from_f64(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.value(x).len())
            .map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep_scale })
            .collect();
        let data = self.value(x).data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(Tensor::new(&shape, data)?, Op::Dropout { x, mask }, &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Config("concat_cols needs at least one input".into()));
        };
        let n = self.dims(first).0;
        for &p in parts {
            if self.dims(p).0 != n {
                return Err(Error::shape("concat_cols", self.shape(first), self.shape(p)));
            }
        }
        let widths: Vec<usize> = parts.iter().map(|&p| self.dims(p).1).collect();
        let total: usize = widths.iter().sum();
        let mut data = vec![T::zero(); n * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for i in 0..n {
                data[i * total + offset..i * total + offset + w].copy_from_slice(&src[i * w..(i + 1) * w]);
            }
            offset += w;
        }
        Ok(self.push(Tensor::new(&[n, total], data)?, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let value = self.value(x).transpose();
        self.push(value, Op::Transpose(x), &[x])
    }

    /// Column means, `n x d -> 1 x d`.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let (n, d) = self.dims(x);
        let value = column_sums(self.value(x).data(), n, d, T::one() / T::from_f64(n.max(1) as f64));
        self.push(value, Op::MeanRows(x), &[x])
    }

    /// Column sums, `n x d -> 1 x d`.
    pub fn sum_rows(&mut self, x: Var) -> Var {
        let (n, d) = self.dims(x);
        let value = column_sums(self.value(x).data(), n, d, T::one());
        self.push(value, Op::SumRows(x), &[x])
    }

    /// Sum of all entries as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::Sum(x), &[x])
    }

    /// Per-segment mean or sum over row ranges `offsets[b]..offsets[b+1]`,
    /// giving one row per segment.
    pub fn segment_pool(&mut self, x: Var, offsets: &Arc<[usize]>, mean: bool) -> Result<Var> {
        let (n, d) = self.dims(x);
        check_offsets(offsets, n, "segment_pool")?;
        let segments = offsets.len() - 1;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); segments * d];
        for b in 0..segments {
            let (s, e) = (offsets[b], offsets[b + 1]);
            let dst = &mut out[b * d..(b + 1) * d];
            for i in s..e {
                for (o, &v) in dst.iter_mut().zip(&src[i * d..(i + 1) * d]) {
                    *o += v;
                }
            }
            if mean && e > s {
                let inv = T::one() / T::from_f64((e - s) as f64);
                dst.iter_mut().for_each(|v| *v *= inv);
            }
        }
        let value = Tensor::new(&[segments, d], out)?;
        Ok(self.push(value, Op::SegmentPool { x, offsets: Arc::clone(offsets), mean }, &[x]))
    }

    /// `out[v] = sum_k weights[v, k] * parts[k][v]`.
    pub fn weighted_sum(&mut self, weights: Var, parts: &[Var]) -> Result<Var> {
        let (n, kk) = self.dims(weights);
        if kk != parts.len() || parts.is_empty() {
            return Err(Error::shape("weighted_sum", self.shape(weights), &[parts.len()]));
        }
        let d = self.dims(parts[0]).1;
        for &p in parts {
            if self.dims(p) != (n, d) {
                return Err(Error::shape("weighted_sum", self.shape(parts[0]), self.shape(p)));
            }
        }
        let w = self.value(weights).data();
        let mut out = vec![T::zero(); n * d];
        for (k, &p) in parts.iter().enumerate() {
            let src = self.value(p).data();
            for i in 0..n {
                let wk = w[i * kk + k];
                for (o, &s) in out[i * d..(i + 1) * d].iter_mut().zip(&src[i * d..(i + 1) * d]) {
                    *o += wk * s;
                }
            }
        }
        let mut inputs = vec![weights];
        inputs.extend_from_slice(parts);
        let value = Tensor::new(&[n, d], out)?;
        Ok(self.push(value, Op::WeightedSum { weights, parts: parts.to_vec() }, &inputs))
    }

    /// Multi-head scaled dot-product attention restricted to diagonal blocks.
    ///
    /// `q`, `k` are `n x (heads * d_h)` and `v` is `n x (heads * d_v)`; head `j`
    /// uses column block `j`. Rows `blocks[b]..blocks[b+1]` only attend to each
    /// other. The output concatenates head outputs column-wise. When `dropout`
    /// is given, inverted dropout is applied to the attention weights.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        blocks: &Arc<[usize]>,
        dropout: Option<(f64, &mut dyn RngCore)>,
    ) -> Result<Var> {
        let ((n, qc), (nk, kc), (nv, vc)) = (self.dims(q), self.dims(k), self.dims(v));
        if nk != n || nv != n || qc != kc {
            return Err(Error::shape("attention", self.shape(q), self.shape(k)));
        }
        if heads == 0 || qc % heads != 0 || vc % heads != 0 {
            return Err(Error::shape("attention", self.shape(q), &[heads]));
        }
        if let Some((p, _)) = &dropout {
            if !(0.0..1.0).contains(p) {
                return Err(Error::Config(format!("attention dropout {p} outside [0, 1)")));
            }
        }
        check_offsets(blocks, n, "attention")?;
        let (dq, dv) = (qc / heads, vc / heads);
        let scale = T::one() / T::from_f64((dq as f64).sqrt());

        let mut block_starts = Vec::with_capacity(blocks.len() - 1);
        let mut per_head = 0;
        for w in blocks.windows(2) {
            block_starts.push(per_head);
            per_head += (w[1] - w[0]) * (w[1] - w[0]);
        }
        let mut probs = vec![T::zero(); per_head * heads];
        let mut out = vec![T::zero(); n * vc];
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());

        let mut keep = None;
        let mut used: Vec<T> = Vec::new();
        if let Some((p, rng)) = dropout.filter(|(p, _)| *p > 0.0) {
            let keep_scale = T::from_f64(1.0 / (1.0 - p));
            keep = Some(
                (0..probs.len())
                    .map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep_scale })
                    .collect::<Vec<T>>(),
            );
        }
        for h in 0..heads {
            for (b, w) in blocks.windows(2).enumerate() {
                let (s, nb) = (w[0], w[1] - w[0]);
                if nb == 0 {
                    continue;
                }
                let off = h * per_head + block_starts[b];
                let p = &mut probs[off..off + nb * nb];
                gemm(
                    scale,
                    View::new(qd, s * qc + h * dq, nb, dq, qc, 1),
                    View::new(kd, s * qc + h * dq, nb, dq, qc, 1).t(),
                    T::zero(),
                    ViewMut::dense(p, nb, nb),
                );
                p.chunks_mut(nb).for_each(softmax_in_place);
                let weights: &[T] = match &keep {
                    Some(mask) => {
                        used.clear();
                        used.extend(p.iter().zip(&mask[off..off + nb * nb]).map(|(&a, &m)| a * m));
                        &used
                    }
                    None => p,
                };
                gemm(
                    T::one(),
                    View::dense(weights, nb, nb),
                    View::new(vd, s * vc + h * dv, nb, dv, vc, 1),
                    T::zero(),
                    ViewMut::new(&mut out, s * vc + h * dv, nb, dv, vc, 1),
                );
            }
        }
        let saved = AttentionSaved {
            q,
            k,
            v,
            heads,
            blocks: Arc::clone(blocks),
            scale,
            probs,
            keep,
            block_starts,
            per_head,
        };
        let value = Tensor::new(&[n, vc], out)?;
        Ok(self.push(value, Op::Attention(Box::new(saved)), &[q, k, v]))
    }

    /// Dense `n x n` attention weights of one head of an attention node, with
    /// zeros outside the diagonal blocks. Weights are taken before dropout.
    pub fn attention_weights(&self, var: Var, head: usize) -> Result<Tensor<T>> {
        let Op::Attention(saved) = &self.nodes[var.0].op else {
            return Err(Error::Autodiff(format!("node {} is not an attention node", var.0)));
        };
        if head >= saved.heads {
            return Err(Error::Config(format!("head {head} of {}", saved.heads)));
        }
        let n = *saved.blocks.last().unwrap();
        let mut dense = Tensor::zeros(&[n, n]);
        for (b, w) in saved.blocks.windows(2).enumerate() {
            let (s, nb) = (w[0], w[1] - w[0]);
            let off = head * saved.per_head + saved.block_starts[b];
            for i in 0..nb {
                for j in 0..nb {
                    dense.set(s + i, s + j, saved.probs[off + i * nb + j]);
                }
            }
        }
        Ok(dense)
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, c) = self.dims(logits);
        if labels.len() != b {
            return Err(Error::shape("cross_entropy", self.shape(logits), &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Data(format!("label {bad} outside [0, {c})")));
        }
        let input = self.value(logits);
        if !input.all_finite() {
            return Err(Error::Numeric("cross_entropy received non-finite logits".into()));
        }
        let mut probs = input.data().to_vec();
        let mut loss = 0.0f64;
        for (row, &label) in probs.chunks_mut(c).zip(labels) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            loss += (lse - row[label]).as_f64();
            softmax_in_place(row);
        }
        let value = Tensor::scalar(T::from_f64(loss / b as f64));
        Ok(self.push(value, Op::CrossEntropy { logits, labels: labels.to_vec(), probs }, &[logits]))
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Fails when called a second time on the same tape: gradients are never
    /// accumulated across passes.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.backward_done {
            return Err(Error::Autodiff("backward already ran on this tape; record a new tape".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Autodiff(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        let fault = BACKWARD_FAULT.with(Cell::get);
        let mut ops_visited = 0;
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            ops_visited += 1;
            let mut contributions = self.op_backward(i, &g)?;
            if fault == Some(node.op.name()) {
                for (_, t) in &mut contributions {
                    t.data_mut().iter_mut().for_each(|v| *v = -*v);
                }
            }
            for (var, t) in contributions {
                accumulate(&mut grads[var.0], t);
            }
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad && grads[i].is_none() {
                grads[i] = Some(Tensor::zeros(node.value.shape()));
            }
            if !matches!(node.op, Op::Leaf) {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads, ops_visited })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn op_backward(&self, i: usize, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let node = &self.nodes[i];
        let gd = g.data();
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let ((n, k), (_, m)) = (self.dims(*a), self.dims(*b));
                if self.wants(*a) {
                    let mut da = vec![T::zero(); n * k];
                    gemm(
                        T::one(),
                        View::dense(gd, n, m),
                        View::dense_t(self.value(*b).data(), k, m),
                        T::zero(),
                        ViewMut::dense(&mut da, n, k),
                    );
                    out.push((*a, Tensor::new(self.shape(*a), da)?));
                }
                if self.wants(*b) {
                    let mut db = vec![T::zero(); k * m];
                    gemm(
                        T::one(),
                        View::dense_t(self.value(*a).data(), n, k),
                        View::dense(gd, n, m),
                        T::zero(),
                        ViewMut::dense(&mut db, k, m),
                    );
                    out.push((*b, Tensor::new(self.shape(*b), db)?));
                }
            }
            Op::Propagate { a, x } => {
                let d = self.dims(*x).1;
                let mut dx = vec![T::zero(); a.cols() * d];
                a.spmm_t_acc(gd, d, &mut dx);
                out.push((*x, Tensor::new(self.shape(*x), dx)?));
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.wants(*v) {
                        out.push((*v, Tensor::new(self.shape(*v), gd.to_vec())?));
                    }
                }
            }
            Op::AddRow(x, b) => {
                let (n, d) = self.dims(*x);
                if self.wants(*x) {
                    out.push((*x, g.clone()));
                }
                if self.wants(*b) {
                    let db = column_sums(gd, n, d, T::one());
                    out.push((*b, Tensor::new(self.shape(*b), db.into_data())?));
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    let da = gd.iter().zip(bv).map(|(&g, &y)| g * y).collect();
                    out.push((*a, Tensor::new(self.shape(*a), da)?));
                }
                if self.wants(*b) {
                    let db = gd.iter().zip(av).map(|(&g, &x)| g * x).collect();
                    out.push((*b, Tensor::new(self.shape(*b), db)?));
                }
            }
            Op::Scale(x, s) => {
                out.push((*x, g.map(|v| v * *s)));
            }
            Op::Activation(x, act) => {
                let input = self.value(*x).data();
                let y = node.value.data();
                let dx = gd
                    .iter()
                    .zip(input)
                    .zip(y)
                    .map(|((&g, &xv), &yv)| g * activate_grad(*act, xv, yv))
                    .collect();
                out.push((*x, Tensor::new(self.shape(*x), dx)?));
            }
            Op::SoftmaxRows(x) => {
                let m = self.dims(*x).1;
                let y = node.value.data();
                let mut dx = vec![T::zero(); y.len()];
                for ((dxr, yr), gr) in dx.chunks_mut(m).zip(y.chunks(m)).zip(gd.chunks(m)) {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for ((d, &yv), &gv) in dxr.iter_mut().zip(yr).zip(gr) {
                        *d = yv * (gv - dot);
                    }
                }
                out.push((*x, Tensor::new(self.shape(*x), dx)?));
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let (n, d) = self.dims(*x);
                let gam = self.value(*gamma).data();
                if self.wants(*gamma) {
                    let mut dg = vec![T::zero(); d];
                    for i in 0..n {
                        for j in 0..d {
                            dg[j] += gd[i * d + j] * xhat[i * d + j];
                        }
                    }
                    out.push((*gamma, Tensor::new(self.shape(*gamma), dg)?));
                }
                if self.wants(*beta) {
                    let db = column_sums(gd, n, d, T::one());
                    out.push((*beta, Tensor::new(self.shape(*beta), db.into_data())?));
                }
                if self.wants(*x) {
                    let inv_d = T::one() / T::from_f64(d as f64);
                    let mut dx = vec![T::zero(); n * d];
                    let mut dxhat = vec![T::zero(); d];
                    for i in 0..n {
                        let xh = &xhat[i * d..(i + 1) * d];
                        for j in 0..d {
                            dxhat[j] = gd[i * d + j] * gam[j];
                        }
                        let mean_dxhat = dxhat.iter().copied().sum::<T>() * inv_d;
                        let mean_dxhat_xhat = dxhat.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>() * inv_d;
                        for j in 0..d {
                            dx[i * d + j] = inv_std[i] * (dxhat[j] - mean_dxhat - xh[j] * mean_dxhat_xhat);
                        }
                    }
                    out.push((*x, Tensor::new(self.shape(*x), dx)?));
                }
            }
            Op::Dropout { x, mask } => {
                let dx = gd.iter().zip(mask).map(|(&g, &m)| g * m).collect();
                out.push((*x, Tensor::new(self.shape(*x), dx)?));
            }
            Op::ConcatCols(parts) => {
                let (n, total) = (node.value.rows(), node.value.cols());
                let mut offset = 0;
                for p in parts {
                    let w = self.dims(*p).1;
                    if self.wants(*p) {
                        let mut dp = vec![T::zero(); n * w];
                        for r in 0..n {
                            dp[r * w..(r + 1) * w]
                                .copy_from_slice(&gd[r * total + offset..r * total + offset + w]);
                        }
                        out.push((*p, Tensor::new(self.shape(*p), dp)?));
                    }
                    offset += w;
                }
            }
            Op::Transpose(x) => {
                let t = g.transpose();
                out.push((*x, Tensor::new(self.shape(*x), t.into_data())?));
            }
            Op::MeanRows(x) | Op::SumRows(x) => {
                let (n, d) = self.dims(*x);
                let factor = match node.op {
                    Op::MeanRows(_) => T::one() / T::from_f64(n.max(1) as f64),
                    _ => T::one(),
                };
                let mut dx = Vec::with_capacity(n * d);
                for _ in 0..n {
                    dx.extend(gd.iter().map(|&v| v * factor));
                }
                out.push((*x, Tensor::new(self.shape(*x), dx)?));
            }
            Op::Sum(x) => {
                out.push((*x, Tensor::full(self.shape(*x), gd[0])));
            }
            Op::SegmentPool { x, offsets, mean } => {
                let (n, d) = self.dims(*x);
                let mut dx = vec![T::zero(); n * d];
                for (b, w) in offsets.windows(2).enumerate() {
                    let (s, e) = (w[0], w[1]);
                    let factor = if *mean && e > s {
                        T::one() / T::from_f64((e - s) as f64)
                    } else {
                        T::one()
                    };
                    let src = &gd[b * d..(b + 1) * d];
                    for i in s..e {
                        for (o, &v) in dx[i * d..(i + 1) * d].iter_mut().zip(src) {
                            *o = v * factor;
                        }
                    }
                }
                out.push((*x, Tensor::new(self.shape(*x), dx)?));
            }
            Op::WeightedSum { weights, parts } => {
                let (n, kk) = self.dims(*weights);
                let d = node.value.cols();
                let w = self.value(*weights).data();
                if self.wants(*weights) {
                    let mut dw = vec![T::zero(); n * kk];
                    for (k, p) in parts.iter().enumerate() {
                        let src = self.value(*p).data();
                        for i in 0..n {
                            dw[i * kk + k] = gd[i * d..(i + 1) * d]
                                .iter()
                                .zip(&src[i * d..(i + 1) * d])
                                .map(|(&a, &b)| a * b)
                                .sum();
                        }
                    }
                    out.push((*weights, Tensor::new(self.shape(*weights), dw)?));
                }
                for (k, p) in parts.iter().enumerate() {
                    if !self.wants(*p) {
                        continue;
                    }
                    let mut dp = vec![T::zero(); n * d];
                    for i in 0..n {
                        let wk = w[i * kk + k];
                        for (o, &gv) in dp[i * d..(i + 1) * d].iter_mut().zip(&gd[i * d..(i + 1) * d]) {
                            *o = wk * gv;
                        }
                    }
                    out.push((*p, Tensor::new(self.shape(*p), dp)?));
                }
            }
            Op::Attention(saved) => {
                out.extend(self.attention_backward(saved, gd)?);
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let (b, c) = self.dims(*logits);
                let scale = gd[0] / T::from_f64(b as f64);
                let mut dx = probs.clone();
                for (row, &label) in dx.chunks_mut(c).zip(labels) {
                    row[label] -= T::one();
                    row.iter_mut().for_each(|v| *v *= scale);
                }
                out.push((*logits, Tensor::new(self.shape(*logits), dx)?));
            }
        }
        Ok(out)
    }

    fn attention_backward(&self, s: &AttentionSaved<T>, gd: &[T]) -> Result<Vec<(Var, Tensor<T>)>> {
        let ((n, qc), vc) = (self.dims(s.q), self.dims(s.v).1);
        let (dq_w, dv_w) = (qc / s.heads, vc / s.heads);
        let (qd, kd, vd) = (self.value(s.q).data(), self.value(s.k).data(), self.value(s.v).data());
        let mut dq = vec![T::zero(); n * qc];
        let mut dk = vec![T::zero(); n * qc];
        let mut dv = vec![T::zero(); n * vc];
        let mut used = Vec::new();
        let mut dp = Vec::new();
        for h in 0..s.heads {
            for (b, w) in s.blocks.windows(2).enumerate() {
                let (st, nb) = (w[0], w[1] - w[0]);
                if nb == 0 {
                    continue;
                }
                let off = h * s.per_head + s.block_starts[b];
                let p = &s.probs[off..off + nb * nb];
                let keep = s.keep.as_ref().map(|k| &k[off..off + nb * nb]);
                let weights: &[T] = match keep {
                    Some(mask) => {
                        used.clear();
                        used.extend(p.iter().zip(mask).map(|(&a, &m)| a * m));
                        &used
                    }
                    None => p,
                };
                let g_view = View::new(gd, st * vc + h * dv_w, nb, dv_w, vc, 1);
                // dV += W^T G
                gemm(
                    T::one(),
                    View::dense_t(weights, nb, nb),
                    g_view,
                    T::one(),
                    ViewMut::new(&mut dv, st * vc + h * dv_w, nb, dv_w, vc, 1),
                );
                // dW = G V^T
                dp.clear();
                dp.resize(nb * nb, T::zero());
                gemm(
                    T::one(),
                    g_view,
                    View::new(vd, st * vc + h * dv_w, nb, dv_w, vc, 1).t(),
                    T::zero(),
                    ViewMut::dense(&mut dp, nb, nb),
                );
                if let Some(mask) = keep {
                    dp.iter_mut().zip(mask).for_each(|(d, &m)| *d *= m);
                }
                // softmax backward, in place: dS = P * (dP - rowsum(dP * P))
                for (dr, pr) in dp.chunks_mut(nb).zip(p.chunks(nb)) {
                    let dot: T = dr.iter().zip(pr).map(|(&a, &b)| a * b).sum();
                    for (d, &pv) in dr.iter_mut().zip(pr) {
                        *d = pv * (*d - dot);
                    }
                }
                gemm(
                    s.scale,
                    View::dense(&dp, nb, nb),
                    View::new(kd, st * qc + h * dq_w, nb, dq_w, qc, 1),
                    T::one(),
                    ViewMut::new(&mut dq, st * qc + h * dq_w, nb, dq_w, qc, 1),
                );
                gemm(
                    s.scale,
                    View::dense_t(&dp, nb, nb),
                    View::new(qd, st * qc + h * dq_w, nb, dq_w, qc, 1),
                    T::one(),
                    ViewMut::new(&mut dk, st * qc + h * dq_w, nb, dq_w, qc, 1),
                );
            }
        }
        let mut out = Vec::with_capacity(3);
        for (var, data) in [(s.q, dq), (s.k, dk), (s.v, dv)] {
            if self.wants(var) {
                out.push((var, Tensor::new(self.shape(var), data)?));
            }
        }
        Ok(out)
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, t: Tensor<T>) {
    match slot {
        Some(existing) => {
            existing.data_mut().iter_mut().zip(t.data()).for_each(|(a, &b)| *a += b);
        }
        None => *slot = Some(t),
    }
}

fn check_offsets(offsets: &[usize], n: usize, op: &'static str) -> Result<()> {
    if offsets.len() < 2 || offsets[0] != 0 || *offsets.last().unwrap() != n {
        return Err(Error::shape(op, &[n], offsets));
    }
    if offsets.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::shape(op, &[n], offsets));
    }
    Ok(())
}

fn column_sums<T: Scalar>(data: &[T], n: usize, d: usize, factor: T) -> Tensor<T> {
    let mut out = vec![T::zero(); d];
    for row in data.chunks(d).take(n) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|v| *v *= factor);
    Tensor::new(&[1, d], out).expect("column sums shape")
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut denom = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        denom += *v;
    }
    let inv = T::one() / denom;
    row.iter_mut().for_each(|v| *v *= inv);
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

fn activate<T: Scalar>(act: Activation, x: T) -> T {
    let half = T::from_f64(0.5);
    match act {
        Activation::Gelu(GeluKind::Tanh) => {
            let u = T::from_f64(SQRT_2_OVER_PI) * (x + T::from_f64(GELU_CUBIC) * x * x * x);
            half * x * (T::one() + u.fast_tanh())
        }
        Activation::Gelu(GeluKind::Erf) => half * x * (T::one() + (x * T::from_f64(std::f64::consts::FRAC_1_SQRT_2)).erf()),
        Activation::Relu => x.max(T::zero()),
        Activation::Tanh => x.fast_tanh(),
    }
}

fn activate_grad<T: Scalar>(act: Activation, x: T, y: T) -> T {
    let half = T::from_f64(0.5);
    match act {
        Activation::Gelu(GeluKind::Tanh) => {
            let c = T::from_f64(SQRT_2_OVER_PI);
            let a = T::from_f64(GELU_CUBIC);
            let t = (c * (x + a * x * x * x)).fast_tanh();
            half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::from_f64(3.0) * a * x * x)
        }
        Activation::Gelu(GeluKind::Erf) => {
            let cdf = half * (T::one() + (x * T::from_f64(std::f64::consts::FRAC_1_SQRT_2)).erf());
            let pdf = (-(x * x) * half).exp() * T::from_f64(1.0 / (2.0 * std::f64::consts::PI).sqrt());
            cdf + x * pdf
        }
        Activation::Relu => {
            if x > T::zero() {
                T::one()
            } else {
                T::zero()
            }
        }
        Activation::Tanh => T::one() - y * y,
    }
}

#[cfg(test)]
mod tests;
