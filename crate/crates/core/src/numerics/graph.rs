//! Reverse-mode differentiation over a recorded tape of whole-tensor operations.
//!
//! Every operation appends a node holding its forward value; nodes are
//! created in topological order, so the backward pass is a single reverse
//! sweep. All graph tensors are 2-D (`[rows, cols]`); vectors are `[1, n]`.

use std::sync::Arc;

use super::real::Real;
use super::tensor::{gemm, MatRef, Tensor};
use crate::error::{Error, Result};

/// Probability floor used by the cross-entropy losses.
pub const PROB_EPS: f64 = 1e-12;
const LN_EPS: f64 = 1e-5;
const NORM_FLOOR: f64 = 1e-12;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Kind of a recorded operation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    Add,
    AddRow,
    Mul,
    Scale,
    DivScalar,
    Gelu,
    Sigmoid,
    Softmax,
    SoftmaxCrossEntropy,
    CrossEntropy,
    BinaryCrossEntropy,
    LayerNorm,
    Gather,
    ConcatRows,
    SliceRows,
    SliceCols,
    ConcatCols,
    SegmentMean,
    SumAll,
    CosineSim,
    MaxOverRows,
    Transpose,
    Reshape,
}

impl OpKind {
    pub const DIFFERENTIABLE: [OpKind; 24] = [
        OpKind::MatMul,
        OpKind::Add,
        OpKind::AddRow,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::DivScalar,
        OpKind::Gelu,
        OpKind::Sigmoid,
        OpKind::Softmax,
        OpKind::SoftmaxCrossEntropy,
        OpKind::CrossEntropy,
        OpKind::BinaryCrossEntropy,
        OpKind::LayerNorm,
        OpKind::Gather,
        OpKind::ConcatRows,
        OpKind::SliceRows,
        OpKind::SliceCols,
        OpKind::ConcatCols,
        OpKind::SegmentMean,
        OpKind::SumAll,
        OpKind::CosineSim,
        OpKind::MaxOverRows,
        OpKind::Transpose,
        OpKind::Reshape,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::AddRow => "add_row",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::DivScalar => "div_scalar",
            OpKind::Gelu => "gelu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Softmax => "softmax",
            OpKind::SoftmaxCrossEntropy => "softmax_cross_entropy",
            OpKind::CrossEntropy => "cross_entropy",
            OpKind::BinaryCrossEntropy => "binary_cross_entropy",
            OpKind::LayerNorm => "layer_norm",
            OpKind::Gather => "gather",
            OpKind::ConcatRows => "concat_rows",
            OpKind::SliceRows => "slice_rows",
            OpKind::SliceCols => "slice_cols",
            OpKind::ConcatCols => "concat_cols",
            OpKind::SegmentMean => "segment_mean",
            OpKind::SumAll => "sum_all",
            OpKind::CosineSim => "cosine_sim",
            OpKind::MaxOverRows => "max_over_rows",
            OpKind::Transpose => "transpose",
            OpKind::Reshape => "reshape",
        }
    }

    pub fn parse(name: &str) -> Option<OpKind> {
        OpKind::DIFFERENTIABLE
            .iter()
            .copied()
            .find(|k| k.name() == name)
    }
}

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool, alpha: T },
    Add(Var, Var),
    AddRow { x: Var, bias: Var },
    Mul(Var, Var),
    Scale(Var, T),
    DivScalar { x: Var, s: Var },
    Gelu(Var),
    Sigmoid(Var),
    Softmax(Var),
    SoftmaxCrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<T> },
    CrossEntropy { pred: Var, target: Tensor<T> },
    BinaryCrossEntropy { s: Var, labels: Vec<T> },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, rstd: Vec<T> },
    Gather { table: Var, ids: Vec<usize> },
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    SegmentMean { x: Var, group: usize },
    SumAll(Var),
    CosineSim { z: Var, e: Var, z_norm: Vec<T>, e_norm: Vec<T> },
    MaxOverRows { x: Var, argmax: Vec<usize> },
    Transpose(Var),
    Reshape(Var),
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::Add(..) => OpKind::Add,
            Op::AddRow { .. } => OpKind::AddRow,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::DivScalar { .. } => OpKind::DivScalar,
            Op::Gelu(_) => OpKind::Gelu,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::Softmax(..) => OpKind::Softmax,
            Op::SoftmaxCrossEntropy { .. } => OpKind::SoftmaxCrossEntropy,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::BinaryCrossEntropy { .. } => OpKind::BinaryCrossEntropy,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Gather { .. } => OpKind::Gather,
            Op::ConcatRows(_) => OpKind::ConcatRows,
            Op::SliceRows { .. } => OpKind::SliceRows,
            Op::SliceCols { .. } => OpKind::SliceCols,
            Op::ConcatCols(_) => OpKind::ConcatCols,
            Op::SegmentMean { .. } => OpKind::SegmentMean,
            Op::SumAll(_) => OpKind::SumAll,
            Op::CosineSim { .. } => OpKind::CosineSim,
            Op::MaxOverRows { .. } => OpKind::MaxOverRows,
            Op::Transpose(_) => OpKind::Transpose,
            Op::Reshape(_) => OpKind::Reshape,
        }
    }
}

struct Node<T> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// A computation tape. Confined to one thread; independent graphs may be
/// built concurrently.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    sign_flip: Option<OpKind>,
}

/// Gradients of a backward pass, indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn c<T: Real>(x: f64) -> T {
    T::from_f64(x)
}

fn ensure_2d<T: Real>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize)> {
    if t.rank() != 2 {
        return Err(Error::dim(op, format!("expected a matrix, got shape {:?}", t.shape())));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            sign_flip: None,
        }
    }

    /// Graph whose backward rule for `kind` is deliberately negated. Used to
    /// demonstrate that the gradient checker catches broken rules.
    pub fn with_sign_flip(kind: OpKind) -> Self {
        Graph {
            nodes: Vec::new(),
            sign_flip: Some(kind),
        }
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

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let s = self.nodes[v.0].value.shape();
        (s[0], s[1])
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Adds an input tensor. 1-D tensors are viewed as `[1, n]`.
    pub fn leaf(&mut self, t: Tensor<T>, requires_grad: bool) -> Result<Var> {
        let t = match t.rank() {
            2 => t,
            1 => {
                let n = t.len();
                t.reshape(&[1, n])?
            }
            r => return Err(Error::dim("leaf", format!("rank {r} tensors are not graph values"))),
        };
        Ok(self.push(t, Op::Leaf, requires_grad))
    }

    /// Adds a shared (parameter) tensor without copying.
    pub fn shared_leaf(&mut self, t: Arc<Tensor<T>>, requires_grad: bool) -> Result<Var> {
        ensure_2d("leaf", &t)?;
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Result<Var> {
        self.leaf(t, false)
    }

    // ----- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ext(a, b, false, false, T::ONE)
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ext(a, b, false, true, T::ONE)
    }

    /// `alpha * op(a) * op(b)` where `op` optionally transposes.
    pub fn matmul_ext(&mut self, a: Var, b: Var, ta: bool, tb: bool, alpha: T) -> Result<Var> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        let ma = MatRef::new(self.value(a).data(), ar, ac, ta);
        let mb = MatRef::new(self.value(b).data(), br, bc, tb);
        let (m, k) = ma.dims();
        let (k2, n) = mb.dims();
        if k != k2 {
            return Err(Error::dim(
                "matmul",
                format!("cannot multiply {:?} by {:?}", ma.dims(), mb.dims()),
            ));
        }
        let mut out = vec![T::ZERO; m * n];
        gemm(ma, mb, alpha, T::ZERO, &mut out);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul { a, b, ta, tb, alpha }, rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).transpose()?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Transpose(x), rg))
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var> {
        let t = self.value(x).clone().reshape(&[rows, cols])?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    // ----- elementwise ----------------------------------------------------

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(shape, data)?, Op::Add(a, b), rg))
    }

    /// Adds a `[1, n]` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (r, n) = self.shape(x);
        if self.shape(bias) != (1, n) {
            return Err(Error::dim(
                "add_row",
                format!("row {:?} for matrix {:?}", self.shape(bias), (r, n)),
            ));
        }
        let b = self.value(bias).data();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(n) {
            for (v, &bb) in row.iter_mut().zip(b) {
                *v += bb;
            }
        }
        let rg = self.rg(&[x, bias]);
        Ok(self.push(Tensor::new(vec![r, n], data)?, Op::AddRow { x, bias }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(shape, data)?, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var> {
        let t = self.value(x).map(|v| v * factor);
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Scale(x, factor), rg))
    }

    /// Divides every element of `x` by the single element of `s`.
    pub fn div_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::dim("div_scalar", format!("divisor shape {:?}", self.shape(s))));
        }
        let d = self.value(s).item();
        let t = self.value(x).map(|v| v / d);
        let rg = self.rg(&[x, s]);
        Ok(self.push(t, Op::DivScalar { x, s }, rg))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(gelu);
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Gelu(x), rg))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(sigmoid);
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Sigmoid(x), rg))
    }

    // ----- normalization and attention kernels ------------------------------

    /// Row-wise softmax with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.softmax_masked(x, false)
    }

    /// Row-wise softmax; with `causal`, entry `(i, j)` for `j > i` is masked out.
    pub fn softmax_masked(&mut self, x: Var, causal: bool) -> Result<Var> {
        let (r, n) = self.shape(x);
        let mut data = self.value(x).data().to_vec();
        for (i, row) in data.chunks_mut(n).enumerate() {
            let visible = if causal { (i + 1).min(n) } else { n };
            softmax_in_place(&mut row[..visible]);
            for v in &mut row[visible..] {
                *v = T::ZERO;
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![r, n], data)?, Op::Softmax(x), rg))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (r, n) = self.shape(x);
        if self.shape(gain) != (1, n) || self.shape(bias) != (1, n) {
            return Err(Error::dim(
                "layer_norm",
                format!("gain {:?} bias {:?} for width {n}", self.shape(gain), self.shape(bias)),
            ));
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let src = self.value(x).data();
        let mut xhat = vec![T::ZERO; r * n];
        let mut rstd = vec![T::ZERO; r];
        let mut out = vec![T::ZERO; r * n];
        let inv_n = c::<T>(1.0 / n as f64);
        for i in 0..r {
            let row = &src[i * n..(i + 1) * n];
            let mean = row.iter().copied().sum::<T>() * inv_n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_n;
            let rs = T::ONE / (var + c(LN_EPS)).sqrt();
            rstd[i] = rs;
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat[i * n + j] = h;
                out[i * n + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            Tensor::new(vec![r, n], out)?,
            Op::LayerNorm { x, gain, bias, xhat, rstd },
            rg,
        ))
    }

    /// Cosine similarity between every row of `z` and every row of `e`.
    /// A zero-norm row on either side yields -1 with no gradient.
    pub fn cosine_sim(&mut self, z: Var, e: Var) -> Result<Var> {
        let (n, d) = self.shape(z);
        let (k, d2) = self.shape(e);
        if d != d2 {
            return Err(Error::dim("cosine_sim", format!("{:?} vs {:?}", (n, d), (k, d2))));
        }
        let zv = self.value(z).data();
        let ev = self.value(e).data();
        let z_norm: Vec<T> = zv.chunks(d).map(|r| r.iter().map(|&x| x * x).sum::<T>().sqrt()).collect();
        let e_norm: Vec<T> = ev.chunks(d).map(|r| r.iter().map(|&x| x * x).sum::<T>().sqrt()).collect();
        let mut out = vec![T::ZERO; n * k];
        for i in 0..n {
            for j in 0..k {
                out[i * k + j] = if z_norm[i].to_f64() < NORM_FLOOR || e_norm[j].to_f64() < NORM_FLOOR {
                    -T::ONE
                } else {
                    let dot: T = zv[i * d..(i + 1) * d]
                        .iter()
                        .zip(&ev[j * d..(j + 1) * d])
                        .map(|(&a, &b)| a * b)
                        .sum();
                    dot / (z_norm[i] * e_norm[j])
                };
            }
        }
        let rg = self.rg(&[z, e]);
        Ok(self.push(
            Tensor::new(vec![n, k], out)?,
            Op::CosineSim { z, e, z_norm, e_norm },
            rg,
        ))
    }

    /// Column-wise maximum over rows: `[n, k] -> [1, k]`. Ties go to the lowest row.
    pub fn max_over_rows(&mut self, x: Var) -> Result<Var> {
        let (n, k) = self.shape(x);
        if n == 0 {
            return Err(Error::dim("max_over_rows", "empty matrix"));
        }
        let v = self.value(x).data();
        let mut argmax = vec![0usize; k];
        let mut out = vec![T::ZERO; k];
        for j in 0..k {
            let mut best = 0;
            for i in 1..n {
                if v[i * k + j] > v[best * k + j] {
                    best = i;
                }
            }
            argmax[j] = best;
            out[j] = v[best * k + j];
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![1, k], out)?, Op::MaxOverRows { x, argmax }, rg))
    }

    // ----- losses -------------------------------------------------------------

    /// Sum over rows of `-ln softmax(logits)[target]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (r, n) = self.shape(logits);
        if targets.len() != r {
            return Err(Error::dim(
                "softmax_cross_entropy",
                format!("{} targets for {} rows", targets.len(), r),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= n) {
            return Err(Error::dim("softmax_cross_entropy", format!("target {bad} outside {n} classes")));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = T::ZERO;
        for (row, &t) in probs.chunks_mut(n).zip(targets) {
            let max = row.iter().copied().fold(row[0], T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            loss += lse - row[t];
            for v in row.iter_mut() {
                *v = (*v - lse).exp();
            }
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// `-sum(target * ln(pred + eps))` over all elements.
    pub fn cross_entropy(&mut self, pred: Var, target: Tensor<T>) -> Result<Var> {
        let (r, n) = self.shape(pred);
        if target.shape() != [r, n] {
            return Err(Error::dim(
                "cross_entropy",
                format!("target {:?} vs prediction {:?}", target.shape(), (r, n)),
            ));
        }
        let loss: T = self
            .value(pred)
            .data()
            .iter()
            .zip(target.data())
            .map(|(&p, &t)| -(t * (p + c(PROB_EPS)).ln()))
            .sum();
        let rg = self.rg(&[pred]);
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { pred, target }, rg))
    }

    /// Sum of binary cross-entropies of probabilities `s` (clamped to
    /// `[eps, 1 - eps]`) against labels in `{0, 1}`.
    pub fn binary_cross_entropy(&mut self, s: Var, labels: &[T]) -> Result<Var> {
        if self.value(s).len() != labels.len() {
            return Err(Error::dim(
                "binary_cross_entropy",
                format!("{} labels for {} probabilities", labels.len(), self.value(s).len()),
            ));
        }
        let loss: T = self
            .value(s)
            .data()
            .iter()
            .zip(labels)
            .map(|(&p, &y)| bce(y, p))
            .sum();
        let rg = self.rg(&[s]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BinaryCrossEntropy {
                s,
                labels: labels.to_vec(),
            },
            rg,
        ))
    }

    // ----- structural -----------------------------------------------------------

    /// Row lookup: `table[ids[i]]` for every `i`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.shape(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::dim("gather", format!("id {bad} outside table of {v} rows")));
        }
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            Tensor::new(vec![ids.len(), d], data)?,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::dim("concat_rows", "no inputs"))?;
        let n = self.shape(first).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c2) = self.shape(p);
            if c2 != n {
                return Err(Error::dim("concat_rows", format!("width {c2} vs {n}")));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let rg = self.rg(parts);
        Ok(self.push(Tensor::new(vec![rows, n], data)?, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::dim("concat_cols", "no inputs"))?;
        let r = self.shape(first).0;
        let widths: Vec<usize> = parts.iter().map(|&p| self.shape(p).1).collect();
        if parts.iter().any(|&p| self.shape(p).0 != r) {
            return Err(Error::dim("concat_cols", "row counts differ"));
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![T::ZERO; r * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for i in 0..r {
                data[i * total + off..i * total + off + w].copy_from_slice(&src[i * w..(i + 1) * w]);
            }
            off += w;
        }
        let rg = self.rg(parts);
        Ok(self.push(Tensor::new(vec![r, total], data)?, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, n) = self.shape(x);
        if start + len > r {
            return Err(Error::dim("slice_rows", format!("rows {start}..{} of {r}", start + len)));
        }
        let data = self.value(x).data()[start * n..(start + len) * n].to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![len, n], data)?, Op::SliceRows { x, start }, rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, n) = self.shape(x);
        if start + len > n {
            return Err(Error::dim("slice_cols", format!("cols {start}..{} of {n}", start + len)));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&src[i * n + start..i * n + start + len]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![r, len], data)?, Op::SliceCols { x, start }, rg))
    }

    /// Mean of each consecutive group of `group` rows.
    pub fn segment_mean(&mut self, x: Var, group: usize) -> Result<Var> {
        let (r, n) = self.shape(x);
        if group == 0 || r % group != 0 {
            return Err(Error::dim("segment_mean", format!("{r} rows in groups of {group}")));
        }
        let src = self.value(x).data();
        let out_rows = r / group;
        let mut data = vec![T::ZERO; out_rows * n];
        let inv = c::<T>(1.0 / group as f64);
        for i in 0..r {
            let o = i / group;
            for j in 0..n {
                data[o * n + j] += src[i * n + j] * inv;
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![out_rows, n], data)?, Op::SegmentMean { x, group }, rg))
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::scalar(s), Op::SumAll(x), rg))
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        let s = self.sum_all(x)?;
        self.scale(s, c(1.0 / n as f64))
    }

    // ----- backward -------------------------------------------------------------

    /// Backward pass from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        if self.value(root).len() != 1 {
            return Err(Error::dim(
                "backward",
                format!("root must be scalar, got {:?}", self.shape(root)),
            ));
        }
        self.backward_with_seed(root, Tensor::scalar(T::ONE))
    }

    /// Backward pass seeded with an explicit upstream gradient for `root`.
    pub fn backward_with_seed(&self, root: Var, seed: Tensor<T>) -> Result<Gradients<T>> {
        if seed.len() != self.value(root).len() {
            return Err(Error::dim(
                "backward",
                format!("seed {:?} for value {:?}", seed.shape(), self.shape(root)),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(seed.into_data());
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.map(|data| {
                    Tensor::new(self.nodes[i].value.shape().to_vec(), data)
                        .expect("gradient shape matches value")
                })
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let sign = if self.sign_flip == Some(node.op.kind()) { -T::ONE } else { T::ONE };
        let out = &node.value;
        let mut acc = |v: Var, contrib: Vec<T>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, c2) in existing.iter_mut().zip(contrib) {
                        *e += sign * c2;
                    }
                }
                slot @ None => {
                    *slot = Some(if sign == T::ONE {
                        contrib
                    } else {
                        contrib.into_iter().map(|x| -x).collect()
                    });
                }
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb, alpha } => {
                let (ar, ac) = self.shape(*a);
                let (br, bc) = self.shape(*b);
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let (m, n) = (out.shape()[0], out.shape()[1]);
                let gm = MatRef::new(g, m, n, false);
                if self.nodes[a.0].requires_grad {
                    let mut da = vec![T::ZERO; ar * ac];
                    if !ta {
                        // dA = dC * op(B)^T
                        gemm(gm, MatRef::new(bv, br, bc, !tb), *alpha, T::ZERO, &mut da);
                    } else {
                        // dA = op(B) * dC^T
                        gemm(MatRef::new(bv, br, bc, *tb), MatRef::new(g, m, n, true), *alpha, T::ZERO, &mut da);
                    }
                    acc(*a, da);
                }
                if self.nodes[b.0].requires_grad {
                    let mut db = vec![T::ZERO; br * bc];
                    if !tb {
                        // dB = op(A)^T * dC
                        gemm(MatRef::new(av, ar, ac, !ta), gm, *alpha, T::ZERO, &mut db);
                    } else {
                        // dB = dC^T * op(A)
                        gemm(MatRef::new(g, m, n, true), MatRef::new(av, ar, ac, *ta), *alpha, T::ZERO, &mut db);
                    }
                    acc(*b, db);
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::AddRow { x, bias } => {
                acc(*x, g.to_vec());
                let n = out.cols();
                let mut db = vec![T::ZERO; n];
                for row in g.chunks(n) {
                    for (d, &v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                acc(*bias, db);
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                acc(*a, g.iter().zip(bv).map(|(&gg, &y)| gg * y).collect());
                acc(*b, g.iter().zip(av).map(|(&gg, &x)| gg * x).collect());
            }
            Op::Scale(x, f) => acc(*x, g.iter().map(|&v| v * *f).collect()),
            Op::DivScalar { x, s } => {
                let d = self.value(*s).item();
                acc(*x, g.iter().map(|&v| v / d).collect());
                let xv = self.value(*x).data();
                let ds: T = g.iter().zip(xv).map(|(&gg, &v)| gg * v).sum::<T>() * (-T::ONE / (d * d));
                acc(*s, vec![ds]);
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                acc(*x, g.iter().zip(xv).map(|(&gg, &v)| gg * gelu_grad(v)).collect());
            }
            Op::Sigmoid(x) => {
                acc(*x, g.iter().zip(out.data()).map(|(&gg, &y)| gg * y * (T::ONE - y)).collect());
            }
            Op::Softmax(x) => {
                let n = out.cols();
                let y = out.data();
                let mut dx = vec![T::ZERO; y.len()];
                for ((dxr, yr), gr) in dx.chunks_mut(n).zip(y.chunks(n)).zip(g.chunks(n)) {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..n {
                        dxr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                acc(*x, dx);
            }
            Op::SoftmaxCrossEntropy { logits, targets, probs } => {
                let n = self.shape(*logits).1;
                let up = g[0];
                let mut dx: Vec<T> = probs.iter().map(|&p| p * up).collect();
                for (r, &t) in targets.iter().enumerate() {
                    dx[r * n + t] -= up;
                }
                acc(*logits, dx);
            }
            Op::CrossEntropy { pred, target } => {
                let up = g[0];
                let pv = self.value(*pred).data();
                acc(
                    *pred,
                    pv.iter()
                        .zip(target.data())
                        .map(|(&p, &t)| -up * t / (p + c(PROB_EPS)))
                        .collect(),
                );
            }
            Op::BinaryCrossEntropy { s, labels } => {
                let up = g[0];
                let sv = self.value(*s).data();
                acc(
                    *s,
                    sv.iter()
                        .zip(labels)
                        .map(|(&p, &y)| up * bce_grad(y, p))
                        .collect(),
                );
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let n = out.cols();
                let gv = self.value(*gain).data();
                let mut dgain = vec![T::ZERO; n];
                let mut dbias = vec![T::ZERO; n];
                let mut dx = vec![T::ZERO; g.len()];
                let inv_n = c::<T>(1.0 / n as f64);
                for (r, (gr, hr)) in g.chunks(n).zip(xhat.chunks(n)).enumerate() {
                    let mut mean_d = T::ZERO;
                    let mut mean_dh = T::ZERO;
                    for j in 0..n {
                        dgain[j] += gr[j] * hr[j];
                        dbias[j] += gr[j];
                        let dh = gr[j] * gv[j];
                        mean_d += dh;
                        mean_dh += dh * hr[j];
                    }
                    mean_d *= inv_n;
                    mean_dh *= inv_n;
                    for j in 0..n {
                        let dh = gr[j] * gv[j];
                        dx[r * n + j] = rstd[r] * (dh - mean_d - hr[j] * mean_dh);
                    }
                }
                acc(*x, dx);
                acc(*gain, dgain);
                acc(*bias, dbias);
            }
            Op::Gather { table, ids } => {
                let (v, d) = self.shape(*table);
                let mut dt = vec![T::ZERO; v * d];
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[id * d + j] += g[r * d + j];
                    }
                }
                acc(*table, dt);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    acc(p, g[off..off + len].to_vec());
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let r = out.rows();
                let mut off = 0;
                for &p in parts {
                    let w = self.shape(p).1;
                    let mut dp = Vec::with_capacity(r * w);
                    for i in 0..r {
                        dp.extend_from_slice(&g[i * total + off..i * total + off + w]);
                    }
                    acc(p, dp);
                    off += w;
                }
            }
            Op::SliceRows { x, start } => {
                let (r, n) = self.shape(*x);
                let mut dx = vec![T::ZERO; r * n];
                dx[start * n..start * n + g.len()].copy_from_slice(g);
                acc(*x, dx);
            }
            Op::SliceCols { x, start } => {
                let (r, n) = self.shape(*x);
                let w = out.cols();
                let mut dx = vec![T::ZERO; r * n];
                for i in 0..r {
                    dx[i * n + start..i * n + start + w].copy_from_slice(&g[i * w..(i + 1) * w]);
                }
                acc(*x, dx);
            }
            Op::SegmentMean { x, group } => {
                let (r, n) = self.shape(*x);
                let inv = c::<T>(1.0 / *group as f64);
                let mut dx = vec![T::ZERO; r * n];
                for i in 0..r {
                    let o = i / group;
                    for j in 0..n {
                        dx[i * n + j] = g[o * n + j] * inv;
                    }
                }
                acc(*x, dx);
            }
            Op::SumAll(x) => {
                let n = self.value(*x).len();
                acc(*x, vec![g[0]; n]);
            }
            Op::CosineSim { z, e, z_norm, e_norm } => {
                let (n, d) = self.shape(*z);
                let k = self.shape(*e).0;
                let zv = self.value(*z).data();
                let ev = self.value(*e).data();
                let cv = out.data();
                let mut dz = vec![T::ZERO; n * d];
                let mut de = vec![T::ZERO; k * d];
                for i in 0..n {
                    for j in 0..k {
                        if z_norm[i].to_f64() < NORM_FLOOR || e_norm[j].to_f64() < NORM_FLOOR {
                            continue;
                        }
                        let gg = g[i * k + j];
                        let cij = cv[i * k + j];
                        let inv = T::ONE / (z_norm[i] * e_norm[j]);
                        let zz = cij / (z_norm[i] * z_norm[i]);
                        let ee = cij / (e_norm[j] * e_norm[j]);
                        for t in 0..d {
                            let zt = zv[i * d + t];
                            let et = ev[j * d + t];
                            dz[i * d + t] += gg * (et * inv - zt * zz);
                            de[j * d + t] += gg * (zt * inv - et * ee);
                        }
                    }
                }
                acc(*z, dz);
                acc(*e, de);
            }
            Op::MaxOverRows { x, argmax } => {
                let (n, k) = self.shape(*x);
                let mut dx = vec![T::ZERO; n * k];
                for (j, &i) in argmax.iter().enumerate() {
                    dx[i * k + j] = g[j];
                }
                acc(*x, dx);
            }
            Op::Transpose(x) => {
                let (r, n) = self.shape(*x);
                // g has shape [n, r]
                let mut dx = vec![T::ZERO; r * n];
                for i in 0..r {
                    for j in 0..n {
                        dx[i * n + j] = g[j * r + i];
                    }
                }
                acc(*x, dx);
            }
            Op::Reshape(x) => acc(*x, g.to_vec()),
        }
    }
}

// ----- scalar kernels ---------------------------------------------------------

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub fn gelu<T: Real>(x: T) -> T {
    let u = c::<T>(GELU_C) * (x + c::<T>(GELU_K) * x * x * x);
    c::<T>(0.5) * x * (T::ONE + u.tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let u = c::<T>(GELU_C) * (x + c::<T>(GELU_K) * x * x * x);
    let t = u.tanh();
    let du = c::<T>(GELU_C) * (T::ONE + c::<T>(3.0 * GELU_K) * x * x);
    c::<T>(0.5) * (T::ONE + t) + c::<T>(0.5) * x * (T::ONE - t * t) * du
}

/// Logistic function, stable for large `|x|`.
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::ZERO {
        T::ONE / (T::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::ONE + e)
    }
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    if row.is_empty() {
        return;
    }
    let max = row.iter().copied().fold(row[0], T::max);
    let mut sum = T::ZERO;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn clamp_prob<T: Real>(p: T) -> (T, bool) {
    let lo = c::<T>(PROB_EPS);
    let hi = T::ONE - lo;
    if p < lo {
        (lo, true)
    } else if p > hi {
        (hi, true)
    } else {
        (p, false)
    }
}

pub(crate) fn bce<T: Real>(y: T, p: T) -> T {
    let (p, _) = clamp_prob(p);
    -(y * p.ln() + (T::ONE - y) * (T::ONE - p).ln())
}

fn bce_grad<T: Real>(y: T, p: T) -> T {
    let (p, clamped) = clamp_prob(p);
    if clamped {
        return T::ZERO;
    }
    -y / p + (T::ONE - y) / (T::ONE - p)
}
