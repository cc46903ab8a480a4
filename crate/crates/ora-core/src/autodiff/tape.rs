//! Tape-based reverse-mode differentiation over dense rank-<=3 tensors.
//!
//! A `Tape` records every forward op; `backward` replays the record once to
//! accumulate gradients for all grad-enabled leaves. Tapes are single-shot:
//! a second backward pass is an error. Every forward op checks its output
//! for non-finite values and fails hard instead of propagating NaN.

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(usize);

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;
/// Fill value for masked attention scores. Large enough that exp underflows
/// to exactly zero after max subtraction, keeping causality bit-exact.
pub const MASK_FILL: f64 = -1.0e30;

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Affine { x: usize, mul: f64 },
    AddRow { x: usize, bias: usize },
    MulRow { x: usize, gain: usize },
    Matmul(usize, usize),
    Transpose(usize),
    GatherRows { x: usize, idx: Vec<usize> },
    ConcatRows(Vec<usize>),
    SliceCols { x: usize, start: usize, end: usize },
    ConcatCols(Vec<usize>),
    Reshape(usize),
    SoftmaxLast(usize),
    LogSumExpLast(usize),
    SubRowwise { x: usize, per_row: usize },
    Log(usize),
    Gelu(usize),
    LayerNormLast { x: usize },
    MaskedFill { x: usize, mask: Vec<bool> },
    ClampMin { x: usize, min: f64 },
    SumLast(usize),
    SumAll(usize),
    MeanAll(usize),
}

struct Node {
    op: Op,
    value: Tensor,
    /// Op-specific saved scalars (layer norm keeps per-row inverse stddev).
    aux: Vec<f64>,
    needs_grad: bool,
}

pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients keyed by tape node, produced by a backward pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: VarId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: VarId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Register an input tensor. Gradient participation follows the
    /// tensor's `requires_grad` flag.
    pub fn leaf(&mut self, t: &Tensor) -> VarId {
        let needs = t.requires_grad();
        self.push(Op::Leaf, t.clone(), Vec::new(), needs)
    }

    /// Register a constant (never differentiated).
    pub fn constant(&mut self, t: Tensor) -> VarId {
        self.push(Op::Leaf, t, Vec::new(), false)
    }

    fn push(&mut self, op: Op, value: Tensor, aux: Vec<f64>, needs_grad: bool) -> VarId {
        self.nodes.push(Node {
            op,
            value,
            aux,
            needs_grad,
        });
        VarId(self.nodes.len() - 1)
    }

    fn emit(&mut self, op_name: &'static str, op: Op, value: Tensor, aux: Vec<f64>) -> Result<VarId> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let needs = match &op {
            Op::Leaf => false,
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Matmul(a, b) => {
                self.nodes[*a].needs_grad || self.nodes[*b].needs_grad
            }
            Op::AddRow { x, bias: o } | Op::MulRow { x, gain: o } | Op::SubRowwise { x, per_row: o } => {
                self.nodes[*x].needs_grad || self.nodes[*o].needs_grad
            }
            Op::ConcatRows(xs) | Op::ConcatCols(xs) => xs.iter().any(|x| self.nodes[*x].needs_grad),
            Op::Affine { x, .. }
            | Op::Transpose(x)
            | Op::GatherRows { x, .. }
            | Op::SliceCols { x, .. }
            | Op::Reshape(x)
            | Op::SoftmaxLast(x)
            | Op::LogSumExpLast(x)
            | Op::Log(x)
            | Op::Gelu(x)
            | Op::LayerNormLast { x, .. }
            | Op::MaskedFill { x, .. }
            | Op::ClampMin { x, .. }
            | Op::SumLast(x)
            | Op::SumAll(x)
            | Op::MeanAll(x) => self.nodes[*x].needs_grad,
        };
        Ok(self.push(op, value, aux, needs))
    }

    fn same_shape(&self, op: &'static str, a: VarId, b: VarId) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op,
                detail: format!("{sa:?} vs {sb:?}"),
            });
        }
        Ok(())
    }

    /// `rows x cols` view of the trailing axis: leading axes are flattened.
    fn rows_cols(t: &Tensor) -> (usize, usize) {
        let c = t.last_dim();
        (t.len() / c, c)
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let out = Tensor::from_vec(self.value(a).shape().to_vec(), data)?;
        self.emit("add", Op::Add(a.0, b.0), out, Vec::new())
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.same_shape("sub", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let out = Tensor::from_vec(self.value(a).shape().to_vec(), data)?;
        self.emit("sub", Op::Sub(a.0, b.0), out, Vec::new())
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::from_vec(self.value(a).shape().to_vec(), data)?;
        self.emit("mul", Op::Mul(a.0, b.0), out, Vec::new())
    }

    /// `mul * x + add`, elementwise with scalar coefficients.
    pub fn affine(&mut self, x: VarId, mul: f64, add: f64) -> Result<VarId> {
        let data = self.value(x).data().iter().map(|v| mul * v + add).collect();
        let out = Tensor::from_vec(self.value(x).shape().to_vec(), data)?;
        self.emit("affine", Op::Affine { x: x.0, mul }, out, Vec::new())
    }

    /// Row-wise bias add: `[.., c] + [c]`.
    pub fn add_row(&mut self, x: VarId, bias: VarId) -> Result<VarId> {
        let (_, c) = Self::rows_cols(self.value(x));
        if self.value(bias).shape() != [c] {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                detail: format!("{:?} + {:?}", self.value(x).shape(), self.value(bias).shape()),
            });
        }
        let bv = self.value(bias).data().to_vec();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + bv[i % c])
            .collect();
        let out = Tensor::from_vec(self.value(x).shape().to_vec(), data)?;
        self.emit("add_row", Op::AddRow { x: x.0, bias: bias.0 }, out, Vec::new())
    }

    /// Row-wise gain: `[.., c] * [c]`.
    pub fn mul_row(&mut self, x: VarId, gain: VarId) -> Result<VarId> {
        let (_, c) = Self::rows_cols(self.value(x));
        if self.value(gain).shape() != [c] {
            return Err(Error::ShapeMismatch {
                op: "mul_row",
                detail: format!("{:?} * {:?}", self.value(x).shape(), self.value(gain).shape()),
            });
        }
        let gv = self.value(gain).data().to_vec();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v * gv[i % c])
            .collect();
        let out = Tensor::from_vec(self.value(x).shape().to_vec(), data)?;
        self.emit("mul_row", Op::MulRow { x: x.0, gain: gain.0 }, out, Vec::new())
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                detail: format!("{:?} x {:?}", ta.shape(), tb.shape()),
            });
        }
        let (r, k, c) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let out = matmul_raw(ta.data(), tb.data(), r, k, c);
        let out = Tensor::matrix(r, c, out)?;
        self.emit("matmul", Op::Matmul(a.0, b.0), out, Vec::new())
    }

    pub fn transpose(&mut self, x: VarId) -> Result<VarId> {
        let t = self.value(x);
        if t.rank() != 2 {
            return Err(Error::ShapeMismatch {
                op: "transpose",
                detail: format!("{:?}", t.shape()),
            });
        }
        let (r, c) = (t.shape()[0], t.shape()[1]);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = t.data()[i * c + j];
            }
        }
        let out = Tensor::matrix(c, r, data)?;
        self.emit("transpose", Op::Transpose(x.0), out, Vec::new())
    }

    /// Select rows of a rank-2 tensor; duplicate indices are allowed and
    /// their gradients accumulate.
    pub fn gather_rows(&mut self, x: VarId, idx: &[usize]) -> Result<VarId> {
        let t = self.value(x);
        if t.rank() != 2 {
            return Err(Error::ShapeMismatch {
                op: "gather_rows",
                detail: format!("{:?}", t.shape()),
            });
        }
        let (n, c) = (t.shape()[0], t.shape()[1]);
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::Bounds(format!("gather_rows index {bad} >= {n}")));
        }
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(&t.data()[i * c..(i + 1) * c]);
        }
        let out = Tensor::matrix(idx.len(), c, data)?;
        self.emit(
            "gather_rows",
            Op::GatherRows {
                x: x.0,
                idx: idx.to_vec(),
            },
            out,
            Vec::new(),
        )
    }

    pub fn concat_rows(&mut self, xs: &[VarId]) -> Result<VarId> {
        if xs.is_empty() {
            return Err(Error::ShapeMismatch {
                op: "concat_rows",
                detail: "no inputs".into(),
            });
        }
        let c = self.value(xs[0]).shape().get(1).copied().unwrap_or(0);
        let mut rows = 0;
        let mut data = Vec::new();
        for &x in xs {
            let t = self.value(x);
            if t.rank() != 2 || t.shape()[1] != c {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    detail: format!("{:?} with cols {c}", t.shape()),
                });
            }
            rows += t.shape()[0];
            data.extend_from_slice(t.data());
        }
        let out = Tensor::matrix(rows, c, data)?;
        self.emit(
            "concat_rows",
            Op::ConcatRows(xs.iter().map(|v| v.0).collect()),
            out,
            Vec::new(),
        )
    }

    pub fn slice_cols(&mut self, x: VarId, start: usize, end: usize) -> Result<VarId> {
        let t = self.value(x);
        if t.rank() != 2 || end > t.shape()[1] || start >= end {
            return Err(Error::ShapeMismatch {
                op: "slice_cols",
                detail: format!("{start}..{end} of {:?}", t.shape()),
            });
        }
        let (r, c) = (t.shape()[0], t.shape()[1]);
        let w = end - start;
        let mut data = Vec::with_capacity(r * w);
        for i in 0..r {
            data.extend_from_slice(&t.data()[i * c + start..i * c + end]);
        }
        let out = Tensor::matrix(r, w, data)?;
        self.emit(
            "slice_cols",
            Op::SliceCols {
                x: x.0,
                start,
                end,
            },
            out,
            Vec::new(),
        )
    }

    pub fn concat_cols(&mut self, xs: &[VarId]) -> Result<VarId> {
        if xs.is_empty() {
            return Err(Error::ShapeMismatch {
                op: "concat_cols",
                detail: "no inputs".into(),
            });
        }
        let r = self.value(xs[0]).shape()[0];
        let widths: Vec<usize> = xs.iter().map(|&x| self.value(x).shape()[1]).collect();
        for &x in xs {
            let t = self.value(x);
            if t.rank() != 2 || t.shape()[0] != r {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    detail: format!("{:?} with rows {r}", t.shape()),
                });
            }
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; r * total];
        let mut off = 0;
        for (&x, &w) in xs.iter().zip(&widths) {
            let t = self.value(x);
            for i in 0..r {
                data[i * total + off..i * total + off + w]
                    .copy_from_slice(&t.data()[i * w..(i + 1) * w]);
            }
            off += w;
        }
        let out = Tensor::matrix(r, total, data)?;
        self.emit(
            "concat_cols",
            Op::ConcatCols(xs.iter().map(|v| v.0).collect()),
            out,
            Vec::new(),
        )
    }

    pub fn reshape(&mut self, x: VarId, shape: Vec<usize>) -> Result<VarId> {
        let t = self.value(x);
        let n: usize = shape.iter().product();
        if n != t.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                detail: format!("{:?} -> {shape:?}", t.shape()),
            });
        }
        let out = Tensor::from_vec(shape, t.data().to_vec())?;
        self.emit("reshape", Op::Reshape(x.0), out, Vec::new())
    }

    // ---- nonlinearities & reductions ----

    /// Numerically stable softmax over the trailing axis.
    pub fn softmax_last(&mut self, x: VarId) -> Result<VarId> {
        let t = self.value(x);
        let (r, c) = Self::rows_cols(t);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let row = &t.data()[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..c {
                let e = (row[j] - m).exp();
                data[i * c + j] = e;
                sum += e;
            }
            for j in 0..c {
                data[i * c + j] /= sum;
            }
        }
        let out = Tensor::from_vec(t.shape().to_vec(), data)?;
        self.emit("softmax", Op::SoftmaxLast(x.0), out, Vec::new())
    }

    /// log(sum(exp(row))) over the trailing axis of a rank-2 tensor -> rank-1.
    pub fn logsumexp_last(&mut self, x: VarId) -> Result<VarId> {
        let t = self.value(x);
        if t.rank() != 2 {
            return Err(Error::ShapeMismatch {
                op: "logsumexp",
                detail: format!("{:?}", t.shape()),
            });
        }
        let (r, c) = (t.shape()[0], t.shape()[1]);
        let mut data = vec![0.0; r];
        for i in 0..r {
            let row = &t.data()[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = row.iter().map(|v| (v - m).exp()).sum();
            data[i] = m + s.ln();
        }
        let out = Tensor::from_vec(vec![r], data)?;
        self.emit("logsumexp", Op::LogSumExpLast(x.0), out, Vec::new())
    }

    /// Subtract `per_row[i]` from every element of row `i`.
    pub fn sub_rowwise(&mut self, x: VarId, per_row: VarId) -> Result<VarId> {
        let t = self.value(x);
        if t.rank() != 2 || self.value(per_row).shape() != [t.shape()[0]] {
            return Err(Error::ShapeMismatch {
                op: "sub_rowwise",
                detail: format!("{:?} - {:?}", t.shape(), self.value(per_row).shape()),
            });
        }
        let (r, c) = (t.shape()[0], t.shape()[1]);
        let v = self.value(per_row).data().to_vec();
        let data = t
            .data()
            .iter()
            .enumerate()
            .map(|(i, e)| e - v[i / c])
            .collect();
        let out = Tensor::matrix(r, c, data)?;
        self.emit(
            "sub_rowwise",
            Op::SubRowwise {
                x: x.0,
                per_row: per_row.0,
            },
            out,
            Vec::new(),
        )
    }

    pub fn log(&mut self, x: VarId) -> Result<VarId> {
        let data = self.value(x).data().iter().map(|v| v.ln()).collect();
        let out = Tensor::from_vec(self.value(x).shape().to_vec(), data)?;
        self.emit("log", Op::Log(x.0), out, Vec::new())
    }

    /// Gelu, tanh approximation; the backward pass differentiates the same
    /// approximation so gradient checks close.
    pub fn gelu(&mut self, x: VarId) -> Result<VarId> {
        let data = self
            .value(x)
            .data()
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh()))
            .collect();
        let out = Tensor::from_vec(self.value(x).shape().to_vec(), data)?;
        self.emit("gelu", Op::Gelu(x.0), out, Vec::new())
    }

    /// Normalize the trailing axis to zero mean, unit variance (no affine).
    /// A constant row maps to zeros thanks to eps in the denominator.
    pub fn layer_norm_last(&mut self, x: VarId, eps: f64) -> Result<VarId> {
        let t = self.value(x);
        let (r, c) = Self::rows_cols(t);
        let mut data = vec![0.0; r * c];
        let mut invstd = vec![0.0; r];
        for i in 0..r {
            let row = &t.data()[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            invstd[i] = inv;
            for j in 0..c {
                data[i * c + j] = (row[j] - mean) * inv;
            }
        }
        let out = Tensor::from_vec(t.shape().to_vec(), data)?;
        self.emit("layer_norm", Op::LayerNormLast { x: x.0 }, out, invstd)
    }

    /// Replace elements where `mask` is true by `fill`.
    pub fn masked_fill(&mut self, x: VarId, mask: &[bool], fill: f64) -> Result<VarId> {
        let t = self.value(x);
        if mask.len() != t.len() {
            return Err(Error::ShapeMismatch {
                op: "masked_fill",
                detail: format!("mask len {} vs tensor len {}", mask.len(), t.len()),
            });
        }
        let data = t
            .data()
            .iter()
            .zip(mask)
            .map(|(&v, &m)| if m { fill } else { v })
            .collect();
        let out = Tensor::from_vec(t.shape().to_vec(), data)?;
        self.emit(
            "masked_fill",
            Op::MaskedFill {
                x: x.0,
                mask: mask.to_vec(),
            },
            out,
            Vec::new(),
        )
    }

    pub fn clamp_min(&mut self, x: VarId, min: f64) -> Result<VarId> {
        let data = self.value(x).data().iter().map(|&v| v.max(min)).collect();
        let out = Tensor::from_vec(self.value(x).shape().to_vec(), data)?;
        self.emit("clamp_min", Op::ClampMin { x: x.0, min }, out, Vec::new())
    }

    /// Row sums over the trailing axis of a rank-2 tensor -> rank-1.
    pub fn sum_last(&mut self, x: VarId) -> Result<VarId> {
        let t = self.value(x);
        if t.rank() != 2 {
            return Err(Error::ShapeMismatch {
                op: "sum_last",
                detail: format!("{:?}", t.shape()),
            });
        }
        let (r, c) = (t.shape()[0], t.shape()[1]);
        let data = (0..r)
            .map(|i| t.data()[i * c..(i + 1) * c].iter().sum())
            .collect();
        let out = Tensor::from_vec(vec![r], data)?;
        self.emit("sum_last", Op::SumLast(x.0), out, Vec::new())
    }

    pub fn sum_all(&mut self, x: VarId) -> Result<VarId> {
        let s: f64 = self.value(x).data().iter().sum();
        self.emit("sum_all", Op::SumAll(x.0), Tensor::scalar(s), Vec::new())
    }

    pub fn mean_all(&mut self, x: VarId) -> Result<VarId> {
        let t = self.value(x);
        let s: f64 = t.data().iter().sum();
        let n = t.len() as f64;
        self.emit("mean_all", Op::MeanAll(x.0), Tensor::scalar(s / n), Vec::new())
    }

    // ---- backward ----

    pub fn backward(&mut self, loss: VarId) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        self.consumed = true;
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            if !self.nodes[i].needs_grad && !matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(grads: &mut [Option<Tensor>], target: usize, shape: &[usize], delta: &[f64]) {
        let slot = grads[target].get_or_insert_with(|| Tensor::zeros(shape.to_vec()));
        for (dst, src) in slot.data_mut().iter_mut().zip(delta) {
            *dst += src;
        }
    }

    fn add_if_needed(&self, grads: &mut [Option<Tensor>], target: usize, delta: Vec<f64>) {
        if !self.nodes[target].needs_grad {
            return;
        }
        let shape = self.nodes[target].value.shape().to_vec();
        Self::accumulate(grads, target, &shape, &delta);
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut Vec<Option<Tensor>>) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.add_if_needed(grads, *a, g.data().to_vec());
                self.add_if_needed(grads, *b, g.data().to_vec());
            }
            Op::Sub(a, b) => {
                self.add_if_needed(grads, *a, g.data().to_vec());
                self.add_if_needed(grads, *b, g.data().iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.nodes[*a].value.data(), self.nodes[*b].value.data());
                self.add_if_needed(grads, *a, g.data().iter().zip(vb).map(|(gv, y)| gv * y).collect());
                self.add_if_needed(grads, *b, g.data().iter().zip(va).map(|(gv, x)| gv * x).collect());
            }
            Op::Affine { x, mul, .. } => {
                self.add_if_needed(grads, *x, g.data().iter().map(|gv| gv * mul).collect());
            }
            Op::AddRow { x, bias } => {
                self.add_if_needed(grads, *x, g.data().to_vec());
                let c = self.nodes[*bias].value.len();
                let mut db = vec![0.0; c];
                for (k, gv) in g.data().iter().enumerate() {
                    db[k % c] += gv;
                }
                self.add_if_needed(grads, *bias, db);
            }
            Op::MulRow { x, gain } => {
                let c = self.nodes[*gain].value.len();
                let gv = self.nodes[*gain].value.data();
                let xv = self.nodes[*x].value.data();
                self.add_if_needed(
                    grads,
                    *x,
                    g.data().iter().enumerate().map(|(k, u)| u * gv[k % c]).collect(),
                );
                let mut dg = vec![0.0; c];
                for (k, u) in g.data().iter().enumerate() {
                    dg[k % c] += u * xv[k];
                }
                self.add_if_needed(grads, *gain, dg);
            }
            Op::Matmul(a, b) => {
                let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let (r, k, c) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                // dA = G . B^T
                if self.nodes[*a].needs_grad {
                    let mut da = vec![0.0; r * k];
                    for i2 in 0..r {
                        for j in 0..c {
                            let gij = g.data()[i2 * c + j];
                            if gij == 0.0 {
                                continue;
                            }
                            for kk in 0..k {
                                da[i2 * k + kk] += gij * tb.data()[kk * c + j];
                            }
                        }
                    }
                    self.add_if_needed(grads, *a, da);
                }
                // dB = A^T . G
                if self.nodes[*b].needs_grad {
                    let mut db = vec![0.0; k * c];
                    for i2 in 0..r {
                        for kk in 0..k {
                            let av = ta.data()[i2 * k + kk];
                            if av == 0.0 {
                                continue;
                            }
                            for j in 0..c {
                                db[kk * c + j] += av * g.data()[i2 * c + j];
                            }
                        }
                    }
                    self.add_if_needed(grads, *b, db);
                }
            }
            Op::Transpose(x) => {
                let t = &self.nodes[*x].value;
                let (r, c) = (t.shape()[0], t.shape()[1]);
                let mut dx = vec![0.0; r * c];
                for i2 in 0..r {
                    for j in 0..c {
                        dx[i2 * c + j] = g.data()[j * r + i2];
                    }
                }
                self.add_if_needed(grads, *x, dx);
            }
            Op::GatherRows { x, idx } => {
                let t = &self.nodes[*x].value;
                let c = t.shape()[1];
                let mut dx = vec![0.0; t.len()];
                for (row, &src) in idx.iter().enumerate() {
                    for j in 0..c {
                        dx[src * c + j] += g.data()[row * c + j];
                    }
                }
                self.add_if_needed(grads, *x, dx);
            }
            Op::ConcatRows(xs) => {
                let mut off = 0;
                for &x in xs {
                    let n = self.nodes[x].value.len();
                    self.add_if_needed(grads, x, g.data()[off..off + n].to_vec());
                    off += n;
                }
            }
            Op::SliceCols { x, start, end } => {
                let t = &self.nodes[*x].value;
                let (r, c) = (t.shape()[0], t.shape()[1]);
                let w = end - start;
                let mut dx = vec![0.0; r * c];
                for i2 in 0..r {
                    for j in 0..w {
                        dx[i2 * c + start + j] = g.data()[i2 * w + j];
                    }
                }
                self.add_if_needed(grads, *x, dx);
            }
            Op::ConcatCols(xs) => {
                let r = self.nodes[xs[0]].value.shape()[0];
                let total: usize = xs.iter().map(|&x| self.nodes[x].value.shape()[1]).sum();
                let mut off = 0;
                for &x in xs {
                    let w = self.nodes[x].value.shape()[1];
                    let mut dx = vec![0.0; r * w];
                    for i2 in 0..r {
                        dx[i2 * w..(i2 + 1) * w]
                            .copy_from_slice(&g.data()[i2 * total + off..i2 * total + off + w]);
                    }
                    self.add_if_needed(grads, x, dx);
                    off += w;
                }
            }
            Op::Reshape(x) => {
                self.add_if_needed(grads, *x, g.data().to_vec());
            }
            Op::SoftmaxLast(x) => {
                let y = &node.value;
                let (r, c) = Self::rows_cols(y);
                let mut dx = vec![0.0; r * c];
                for i2 in 0..r {
                    let yrow = &y.data()[i2 * c..(i2 + 1) * c];
                    let grow = &g.data()[i2 * c..(i2 + 1) * c];
                    let dot: f64 = yrow.iter().zip(grow).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dx[i2 * c + j] = yrow[j] * (grow[j] - dot);
                    }
                }
                self.add_if_needed(grads, *x, dx);
            }
            Op::LogSumExpLast(x) => {
                let t = &self.nodes[*x].value;
                let (r, c) = (t.shape()[0], t.shape()[1]);
                let lse = node.value.data();
                let mut dx = vec![0.0; r * c];
                for i2 in 0..r {
                    let gi = g.data()[i2];
                    for j in 0..c {
                        dx[i2 * c + j] = gi * (t.data()[i2 * c + j] - lse[i2]).exp();
                    }
                }
                self.add_if_needed(grads, *x, dx);
            }
            Op::SubRowwise { x, per_row } => {
                let c = self.nodes[*x].value.last_dim();
                self.add_if_needed(grads, *x, g.data().to_vec());
                let r = self.nodes[*per_row].value.len();
                let mut dv = vec![0.0; r];
                for (k, u) in g.data().iter().enumerate() {
                    dv[k / c] -= u;
                }
                self.add_if_needed(grads, *per_row, dv);
            }
            Op::Log(x) => {
                let xv = self.nodes[*x].value.data();
                self.add_if_needed(grads, *x, g.data().iter().zip(xv).map(|(gv, v)| gv / v).collect());
            }
            Op::Gelu(x) => {
                let xv = self.nodes[*x].value.data();
                let dx = g
                    .data()
                    .iter()
                    .zip(xv)
                    .map(|(gv, &v)| {
                        let inner = GELU_C * (v + GELU_A * v * v * v);
                        let t = inner.tanh();
                        let d_inner = GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                        gv * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * d_inner)
                    })
                    .collect();
                self.add_if_needed(grads, *x, dx);
            }
            Op::LayerNormLast { x } => {
                let y = node.value.data();
                let invstd = &node.aux;
                let c = self.nodes[*x].value.last_dim();
                let r = self.nodes[*x].value.len() / c;
                let mut dx = vec![0.0; r * c];
                for i2 in 0..r {
                    let yrow = &y[i2 * c..(i2 + 1) * c];
                    let grow = &g.data()[i2 * c..(i2 + 1) * c];
                    let gmean: f64 = grow.iter().sum::<f64>() / c as f64;
                    let gydot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                    for j in 0..c {
                        dx[i2 * c + j] = invstd[i2] * (grow[j] - gmean - yrow[j] * gydot);
                    }
                }
                self.add_if_needed(grads, *x, dx);
            }
            Op::MaskedFill { x, mask } => {
                let dx = g
                    .data()
                    .iter()
                    .zip(mask)
                    .map(|(&gv, &m)| if m { 0.0 } else { gv })
                    .collect();
                self.add_if_needed(grads, *x, dx);
            }
            Op::ClampMin { x, min } => {
                let xv = self.nodes[*x].value.data();
                let dx = g
                    .data()
                    .iter()
                    .zip(xv)
                    .map(|(&gv, &v)| if v > *min { gv } else { 0.0 })
                    .collect();
                self.add_if_needed(grads, *x, dx);
            }
            Op::SumLast(x) => {
                let c = self.nodes[*x].value.last_dim();
                let n = self.nodes[*x].value.len();
                let mut dx = vec![0.0; n];
                for (k, slot) in dx.iter_mut().enumerate() {
                    *slot = g.data()[k / c];
                }
                self.add_if_needed(grads, *x, dx);
            }
            Op::SumAll(x) => {
                let n = self.nodes[*x].value.len();
                self.add_if_needed(grads, *x, vec![g.data()[0]; n]);
            }
            Op::MeanAll(x) => {
                let n = self.nodes[*x].value.len();
                self.add_if_needed(grads, *x, vec![g.data()[0] / n as f64; n]);
            }
        }
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], r: usize, k: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * c..(i + 1) * c];
        for (kk, &aik) in arow.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let brow = &b[kk * c..(kk + 1) * c];
            for j in 0..c {
                orow[j] += aik * brow[j];
            }
        }
    }
    out
}
