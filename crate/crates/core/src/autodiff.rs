//! Linear-tape reverse-mode automatic differentiation.
//!
//! A [`Graph`] owns every intermediate value produced during one forward
//! pass. Operations whose inputs require gradients append a record to the
//! tape; [`Graph::backward`] replays those records in reverse.

use std::borrow::Cow;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Fill value for attention scores above the diagonal. Finite so the
/// non-finite guard stays meaningful; `exp` of it underflows to exactly 0.
pub const MASK_FILL: f64 = -1e30;

const GELU_COEF: f64 = 0.044_715;

/// Handle to a value recorded in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    /// Leaf value or an op recorded without gradient tracking.
    None,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Reshape(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        shift: Var,
        normed: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(Var),
    CausalMask(Var),
    SplitHeads {
        x: Var,
        batch: usize,
        seq: usize,
        heads: usize,
    },
    MergeHeads {
        x: Var,
        batch: usize,
        seq: usize,
        heads: usize,
    },
    CrossEntropy {
        logits: Var,
        picks: Vec<(usize, usize)>,
        probs: Vec<f64>,
    },
    Sum(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::None => "leaf",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddBias(..) => "add_bias",
            Op::MatMul { .. } => "matmul",
            Op::BatchMatMul { .. } => "batch_matmul",
            Op::Gather { .. } => "gather",
            Op::Reshape(..) => "reshape",
            Op::Softmax(..) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu(..) => "gelu",
            Op::CausalMask(..) => "causal_mask",
            Op::SplitHeads { .. } => "split_heads",
            Op::MergeHeads { .. } => "merge_heads",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Sum(..) => "sum",
        }
    }
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Gradients of a scalar with respect to every gradient-tracking leaf.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `var`; all zeros when the loss does not depend on it.
    pub fn wrt(&self, var: Var) -> Tensor {
        let shape = &self.shapes[var.0];
        match &self.grads[var.0] {
            Some(g) => Tensor::new(shape.clone(), g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }

    pub fn take(&mut self, var: Var) -> Vec<f64> {
        let numel = self.shapes[var.0].iter().product();
        self.grads[var.0].take().unwrap_or_else(|| vec![0.0; numel])
    }
}

/// Computation tape for one forward/backward pass.
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
    recorded: usize,
    consumed: bool,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            recorded: 0,
            consumed: false,
        }
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Number of operations recorded for backward.
    pub fn tape_len(&self) -> usize {
        self.recorded
    }

    /// Adds an owned leaf; it tracks gradients iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let requires_grad = tensor.requires_grad();
        self.push_leaf(Cow::Owned(tensor), requires_grad)
    }

    /// Adds a borrowed leaf without copying its buffer.
    pub fn leaf_ref(&mut self, tensor: &'a Tensor, requires_grad: bool) -> Var {
        self.push_leaf(Cow::Borrowed(tensor), requires_grad)
    }

    fn push_leaf(&mut self, value: Cow<'a, Tensor>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad {
            self.recorded += 1;
            op
        } else {
            Op::None
        };
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let x = self.value(a);
        let data = x.data().iter().map(|p| p * factor).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        self.push(out, Op::Scale(a, factor), &[a])
    }

    /// `x[.., n] + bias[n]`, broadcasting over leading dimensions.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if bv.rank() != 1 || bv.numel() != xv.cols() {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                lhs: xv.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let n = xv.cols();
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(n) {
            for (o, b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        self.push(out, Op::AddBias(x, bias), &[x, bias])
    }

    /// `a[.., k] @ b[k, n]`, or `a[.., k] @ b[n, k]ᵀ` when `trans_b`.
    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let mismatch = || Error::ShapeMismatch {
            op: "matmul",
            lhs: av.shape().to_vec(),
            rhs: bv.shape().to_vec(),
        };
        if bv.rank() != 2 {
            return Err(mismatch());
        }
        let (k, n) = if trans_b {
            (bv.shape()[1], bv.shape()[0])
        } else {
            (bv.shape()[0], bv.shape()[1])
        };
        if av.cols() != k {
            return Err(mismatch());
        }
        let m = av.rows();
        let mut data = vec![0.0; m * n];
        gemm(m, k, n, av.data(), false, bv.data(), trans_b, &mut data, false);
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let out = Tensor::new(shape, data)?;
        self.push(out, Op::MatMul { a, b, trans_b }, &[a, b])
    }

    /// Batched `a[B, m, k] @ b[B, k, n]` (or `b[B, n, k]ᵀ` when `trans_b`).
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let mismatch = || Error::ShapeMismatch {
            op: "batch_matmul",
            lhs: av.shape().to_vec(),
            rhs: bv.shape().to_vec(),
        };
        if av.rank() != 3 || bv.rank() != 3 || av.shape()[0] != bv.shape()[0] {
            return Err(mismatch());
        }
        let (batch, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
        let (bk, n) = if trans_b {
            (bv.shape()[2], bv.shape()[1])
        } else {
            (bv.shape()[1], bv.shape()[2])
        };
        if bk != k {
            return Err(mismatch());
        }
        let mut data = vec![0.0; batch * m * n];
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                &av.data()[i * m * k..(i + 1) * m * k],
                false,
                &bv.data()[i * k * n..(i + 1) * k * n],
                trans_b,
                &mut data[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        let out = Tensor::new(vec![batch, m, n], data)?;
        self.push(out, Op::BatchMatMul { a, b, trans_b }, &[a, b])
    }

    /// Row lookup: `table[V, D]` indexed by `ids` gives `[ids.len(), D]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        if tv.rank() != 2 {
            return Err(Error::invalid(
                "gather",
                format!("table must be rank 2, got {:?}", tv.shape()),
            ));
        }
        if ids.is_empty() {
            return Err(Error::invalid("gather", "no ids"));
        }
        let (vocab, width) = (tv.shape()[0], tv.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * width);
        for &id in ids {
            if id >= vocab {
                return Err(Error::invalid(
                    "gather",
                    format!("id {id} out of range for table with {vocab} rows"),
                ));
            }
            data.extend_from_slice(&tv.data()[id * width..(id + 1) * width]);
        }
        let out = Tensor::new(vec![ids.len(), width], data)?;
        self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().with_grad(false).reshape(shape)?;
        self.push(out, Op::Reshape(x), &[x])
    }

    /// Numerically stabilized softmax over the last dimension.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if !xv.is_finite() {
            return Err(Error::NonFinite { op: "softmax" });
        }
        let n = xv.cols();
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(n) {
            softmax_in_place(row);
        }
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        self.push(out, Op::Softmax(x), &[x])
    }

    /// Layer normalization over the last dimension with learned gain and shift.
    pub fn layer_norm(&mut self, x: Var, gain: Var, shift: Var, eps: f64) -> Result<Var> {
        let (xv, gv, sv) = (self.value(x), self.value(gain), self.value(shift));
        let n = xv.cols();
        if gv.shape() != [n] || sv.shape() != [n] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: xv.shape().to_vec(),
                rhs: gv.shape().to_vec(),
            });
        }
        let rows = xv.rows();
        let mut normed = vec![0.0; rows * n];
        let mut rstd = vec![0.0; rows];
        let mut data = vec![0.0; rows * n];
        for r in 0..rows {
            let row = &xv.data()[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            rstd[r] = inv;
            for j in 0..n {
                let h = (row[j] - mean) * inv;
                normed[r * n + j] = h;
                data[r * n + j] = h * gv.data()[j] + sv.data()[j];
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                shift,
                normed,
                rstd,
            },
            &[x, gain, shift],
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| gelu(v)).collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        self.push(out, Op::Gelu(x), &[x])
    }

    /// Replaces entries above the diagonal of each trailing `[T, T]` block
    /// with [`MASK_FILL`].
    pub fn causal_mask(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let shape = xv.shape();
        if shape.len() < 2 || shape[shape.len() - 1] != shape[shape.len() - 2] {
            return Err(Error::invalid(
                "causal_mask",
                format!("expected trailing square block, got {shape:?}"),
            ));
        }
        let t = xv.cols();
        let mut data = xv.data().to_vec();
        for block in data.chunks_mut(t * t) {
            for i in 0..t {
                for v in &mut block[i * t + i + 1..(i + 1) * t] {
                    *v = MASK_FILL;
                }
            }
        }
        let out = Tensor::new(shape.to_vec(), data)?;
        self.push(out, Op::CausalMask(x), &[x])
    }

    /// `[batch * seq, heads * dh]` to `[batch * heads, seq, dh]`.
    pub fn split_heads(&mut self, x: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let xv = self.value(x);
        let width = xv.cols();
        if xv.rows() != batch * seq || width % heads != 0 {
            return Err(Error::invalid(
                "split_heads",
                format!(
                    "cannot split {:?} into batch {batch}, seq {seq}, heads {heads}",
                    xv.shape()
                ),
            ));
        }
        let dh = width / heads;
        let mut data = vec![0.0; xv.numel()];
        for b in 0..batch {
            for t in 0..seq {
                let src = &xv.data()[(b * seq + t) * width..(b * seq + t + 1) * width];
                for h in 0..heads {
                    let dst = ((b * heads + h) * seq + t) * dh;
                    data[dst..dst + dh].copy_from_slice(&src[h * dh..(h + 1) * dh]);
                }
            }
        }
        let out = Tensor::new(vec![batch * heads, seq, dh], data)?;
        self.push(out, Op::SplitHeads { x, batch, seq, heads }, &[x])
    }

    /// Inverse of [`Graph::split_heads`]; output is `[batch * seq, heads * dh]`.
    pub fn merge_heads(&mut self, x: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 3 || xv.shape()[0] != batch * heads || xv.shape()[1] != seq {
            return Err(Error::invalid(
                "merge_heads",
                format!(
                    "cannot merge {:?} with batch {batch}, seq {seq}, heads {heads}",
                    xv.shape()
                ),
            ));
        }
        let dh = xv.shape()[2];
        let width = heads * dh;
        let mut data = vec![0.0; xv.numel()];
        for b in 0..batch {
            for t in 0..seq {
                for h in 0..heads {
                    let src = ((b * heads + h) * seq + t) * dh;
                    let dst = (b * seq + t) * width + h * dh;
                    data[dst..dst + dh].copy_from_slice(&xv.data()[src..src + dh]);
                }
            }
        }
        let out = Tensor::new(vec![batch * seq, width], data)?;
        self.push(out, Op::MergeHeads { x, batch, seq, heads }, &[x])
    }

    /// Mean cross-entropy over the selected `(row, target)` pairs of `logits[.., V]`.
    pub fn cross_entropy(&mut self, logits: Var, picks: &[(usize, usize)]) -> Result<Var> {
        if picks.is_empty() {
            return Err(Error::invalid("cross_entropy", "no positions selected"));
        }
        let lv = self.value(logits);
        let (rows, vocab) = (lv.rows(), lv.cols());
        let mut probs = Vec::with_capacity(picks.len() * vocab);
        let mut total = 0.0;
        for &(row, target) in picks {
            if row >= rows || target >= vocab {
                return Err(Error::invalid(
                    "cross_entropy",
                    format!("pick ({row}, {target}) outside logits {:?}", lv.shape()),
                ));
            }
            let start = probs.len();
            probs.extend_from_slice(&lv.data()[row * vocab..(row + 1) * vocab]);
            let p = &mut probs[start..];
            let max = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + p.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - p[target];
            for v in p.iter_mut() {
                *v = (*v - lse).exp();
            }
        }
        let out = Tensor::scalar(total / picks.len() as f64);
        self.push(
            out,
            Op::CrossEntropy {
                logits,
                picks: picks.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).data().iter().sum());
        self.push(out, Op::Sum(x), &[x])
    }

    /// Reverse pass from a scalar `loss`. A graph can be differentiated once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::Backward("tape already consumed by a previous backward".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Backward(format!(
                "loss must be scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.consumed = true;

        let count = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; count];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        let mut leaf_grads: Vec<Option<Vec<f64>>> = vec![None; count];

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if matches!(node.op, Op::None) {
                if node.requires_grad {
                    leaf_grads[idx] = Some(g);
                }
                continue;
            }
            self.backprop_node(idx, &g, &mut grads);
        }

        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients {
            grads: leaf_grads,
            shapes,
        })
    }

    fn backprop_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| -> &Tensor { &nodes[v.0].value };
        let tracks = |v: Var| nodes[v.0].requires_grad;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]);
            f(buf);
        };
        let out = &nodes[idx].value;

        match &nodes[idx].op {
            Op::None => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    acc(v, &mut |buf| add_into(buf, g));
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                acc(*a, &mut |buf| {
                    for ((o, gi), y) in buf.iter_mut().zip(g).zip(bv) {
                        *o += gi * y;
                    }
                });
                acc(*b, &mut |buf| {
                    for ((o, gi), x) in buf.iter_mut().zip(g).zip(av) {
                        *o += gi * x;
                    }
                });
            }
            Op::Scale(a, factor) => {
                acc(*a, &mut |buf| {
                    for (o, gi) in buf.iter_mut().zip(g) {
                        *o += gi * factor;
                    }
                });
            }
            Op::AddBias(x, bias) => {
                acc(*x, &mut |buf| add_into(buf, g));
                let n = val(*bias).numel();
                acc(*bias, &mut |buf| {
                    for row in g.chunks(n) {
                        add_into(buf, row);
                    }
                });
            }
            Op::MatMul { a, b, trans_b } => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.rows(), av.cols(), out.cols());
                acc(*a, &mut |buf| {
                    // dA[m,k] = dC[m,n] · Bᵀ
                    gemm(m, n, k, g, false, bv.data(), !trans_b, buf, true);
                });
                acc(*b, &mut |buf| {
                    if *trans_b {
                        // dB[n,k] = dCᵀ · A
                        gemm(n, m, k, g, true, av.data(), false, buf, true);
                    } else {
                        // dB[k,n] = Aᵀ · dC
                        gemm(k, m, n, av.data(), true, g, false, buf, true);
                    }
                });
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let (av, bv) = (val(*a), val(*b));
                let (batch, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                let n = out.shape()[2];
                acc(*a, &mut |buf| {
                    for i in 0..batch {
                        gemm(
                            m,
                            n,
                            k,
                            &g[i * m * n..(i + 1) * m * n],
                            false,
                            &bv.data()[i * k * n..(i + 1) * k * n],
                            !trans_b,
                            &mut buf[i * m * k..(i + 1) * m * k],
                            true,
                        );
                    }
                });
                acc(*b, &mut |buf| {
                    for i in 0..batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let ai = &av.data()[i * m * k..(i + 1) * m * k];
                        let bi = &mut buf[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            gemm(n, m, k, gi, true, ai, false, bi, true);
                        } else {
                            gemm(k, m, n, ai, true, gi, false, bi, true);
                        }
                    }
                });
            }
            Op::Gather { table, ids } => {
                let width = val(*table).cols();
                acc(*table, &mut |buf| {
                    for (row, &id) in ids.iter().enumerate() {
                        add_into(
                            &mut buf[id * width..(id + 1) * width],
                            &g[row * width..(row + 1) * width],
                        );
                    }
                });
            }
            Op::Reshape(x) => acc(*x, &mut |buf| add_into(buf, g)),
            Op::Softmax(x) => {
                let n = out.cols();
                acc(*x, &mut |buf| {
                    for ((o, y), gy) in buf.chunks_mut(n).zip(out.data().chunks(n)).zip(g.chunks(n)) {
                        let dot: f64 = y.iter().zip(gy).map(|(p, q)| p * q).sum();
                        for j in 0..n {
                            o[j] += y[j] * (gy[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                shift,
                normed,
                rstd,
            } => {
                let n = out.cols();
                let gv = val(*gain).data();
                acc(*gain, &mut |buf| {
                    for (gy, h) in g.chunks(n).zip(normed.chunks(n)) {
                        for j in 0..n {
                            buf[j] += gy[j] * h[j];
                        }
                    }
                });
                acc(*shift, &mut |buf| {
                    for gy in g.chunks(n) {
                        add_into(buf, gy);
                    }
                });
                if tracks(*x) {
                    acc(*x, &mut |buf| {
                        let mut dh = vec![0.0; n];
                        for (r, (o, (gy, h))) in buf.chunks_mut(n).zip(g.chunks(n).zip(normed.chunks(n))).enumerate() {
                            for j in 0..n {
                                dh[j] = gy[j] * gv[j];
                            }
                            let mean_dh = dh.iter().sum::<f64>() / n as f64;
                            let mean_dhh = dh.iter().zip(h).map(|(p, q)| p * q).sum::<f64>() / n as f64;
                            for j in 0..n {
                                o[j] += rstd[r] * (dh[j] - mean_dh - h[j] * mean_dhh);
                            }
                        }
                    });
                }
            }
            Op::Gelu(x) => {
                let xv = val(*x).data();
                acc(*x, &mut |buf| {
                    for ((o, gi), &v) in buf.iter_mut().zip(g).zip(xv) {
                        *o += gi * gelu_grad(v);
                    }
                });
            }
            Op::CausalMask(x) => {
                let t = out.cols();
                acc(*x, &mut |buf| {
                    for (ob, gb) in buf.chunks_mut(t * t).zip(g.chunks(t * t)) {
                        for i in 0..t {
                            add_into(&mut ob[i * t..i * t + i + 1], &gb[i * t..i * t + i + 1]);
                        }
                    }
                });
            }
            Op::SplitHeads { x, batch, seq, heads } => {
                let width = val(*x).cols();
                let dh = width / heads;
                acc(*x, &mut |buf| {
                    for b in 0..*batch {
                        for t in 0..*seq {
                            for h in 0..*heads {
                                let src = ((b * heads + h) * seq + t) * dh;
                                let dst = (b * seq + t) * width + h * dh;
                                add_into(&mut buf[dst..dst + dh], &g[src..src + dh]);
                            }
                        }
                    }
                });
            }
            Op::MergeHeads { x, batch, seq, heads } => {
                let dh = val(*x).shape()[2];
                let width = heads * dh;
                acc(*x, &mut |buf| {
                    for b in 0..*batch {
                        for t in 0..*seq {
                            for h in 0..*heads {
                                let dst = ((b * heads + h) * seq + t) * dh;
                                let src = (b * seq + t) * width + h * dh;
                                add_into(&mut buf[dst..dst + dh], &g[src..src + dh]);
                            }
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, picks, probs } => {
                let vocab = val(*logits).cols();
                let scale = g[0] / picks.len() as f64;
                acc(*logits, &mut |buf| {
                    for (i, &(row, target)) in picks.iter().enumerate() {
                        let o = &mut buf[row * vocab..(row + 1) * vocab];
                        let p = &probs[i * vocab..(i + 1) * vocab];
                        for j in 0..vocab {
                            o[j] += scale * p[j];
                        }
                        o[target] -= scale;
                    }
                });
            }
            Op::Sum(x) => {
                let g0 = g[0];
                acc(*x, &mut |buf| {
                    for o in buf.iter_mut() {
                        *o += g0;
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + GELU_COEF * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let t = (c * (x + GELU_COEF * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * GELU_COEF * x * x)
}

/// `C[m,n] (+)= op(A)[m,k] · op(B)[k,n]` on row-major buffers. When `a_t`
/// is set, `a` holds the `[k, m]` matrix; when `b_t` is set, `b` holds `[n, k]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k, "gemm: lhs buffer");
    assert_eq!(b.len(), k * n, "gemm: rhs buffer");
    assert_eq!(c.len(), m * n, "gemm: output buffer");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above guarantee each strided view stays inside its
    // buffer, and `c` is uniquely borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
