//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every operation applied to its variables. Nodes are
//! appended in creation order, so the node list is already topologically
//! sorted and [`Tape::backward`] is a single reverse sweep.
//!
//! Leaf gradients accumulate across `backward` calls until
//! [`Tape::zero_grads`] is called. Intermediate gradients are scratch
//! buffers owned by one sweep.
//!
//! Matrices are rank-2 and row-major. Sequence batches use a time-major row
//! layout, `row = t * batch + b`, so one time step of a batch is a contiguous
//! block of rows.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::tensor::{gemm_acc, gemm_tn_acc, transpose, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Tanh,
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
}

/// Clamp applied to probabilities before taking logarithms.
pub const PROB_EPS: f64 = 1e-12;

const LAYER_NORM_EPS: f64 = 1e-5;

/// Shape of a batched causal self-attention call.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionShape {
    pub steps: usize,
    pub batch: usize,
    pub heads: usize,
    /// Multiplier applied to every query-key dot product.
    pub scale: f64,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Binary(Elementwise, Var, Var),
    Scale(Var, f64),
    RowScale(Var, Vec<f64>),
    AddBias(Var, Var),
    Act(Activation, Var),
    Gather {
        table: Var,
        indices: Vec<usize>,
    },
    MaskedSoftmax {
        input: Var,
        valid: Vec<usize>,
    },
    SliceRows {
        input: Var,
        start: usize,
    },
    SliceCols {
        input: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    LayerNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        shape: AttentionShape,
        probs: Vec<f64>,
    },
    Pick {
        input: Var,
        indices: Vec<usize>,
    },
    Sum(Var),
    Mean(Var),
    Bce {
        pred: Var,
        targets: Vec<f64>,
        weights: Vec<f64>,
        denom: f64,
    },
    Mse {
        pred: Var,
        targets: Vec<f64>,
        weights: Vec<f64>,
        denom: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Operation recorder and gradient engine.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grad_enabled: bool,
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A tape whose leaves never require gradients; used for inference.
    pub fn no_grad() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        let rg = self.grad_enabled;
        self.push_raw(value, rg, Op::Leaf)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, false, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push_raw(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, inputs: &[Var], op: Op) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_raw(value, rg, op)
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        self.value(v)
            .dims2()
            .ok_or_else(|| Error::shape(op, self.shape(v), &[]))
    }

    // ----- linear algebra ---------------------------------------------------

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm_acc(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            m,
            k,
            n,
        );
        let value = Tensor::new(&[m, n], out)?;
        Ok(self.push(value, &[a, b], Op::MatMul(a, b)))
    }

    /// `a[m×k] · b[n×k]ᵀ`, the natural form for weights stored `out × in`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul_nt")?;
        let (n, k2) = self.dims2(b, "matmul_nt")?;
        if k != k2 {
            return Err(Error::shape("matmul_nt", self.shape(a), self.shape(b)));
        }
        let bt = transpose(self.value(b).data(), n, k);
        let mut out = vec![0.0; m * n];
        gemm_acc(self.value(a).data(), &bt, &mut out, m, k, n);
        let value = Tensor::new(&[m, n], out)?;
        Ok(self.push(value, &[a, b], Op::MatMulNt(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2(a, "transpose")?;
        let value = Tensor::new(&[n, m], transpose(self.value(a).data(), m, n))?;
        Ok(self.push(value, &[a], Op::Transpose(a)))
    }

    // ----- elementwise ------------------------------------------------------

    /// Elementwise `a ∘ b` over identical shapes; a scalar operand
    /// broadcasts against a tensor of any shape.
    pub fn elementwise(&mut self, op: Elementwise, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a), self.value(b));
        let shape = if sa.shape() == sb.shape() {
            sa.shape().to_vec()
        } else if sa.is_scalar() {
            sb.shape().to_vec()
        } else if sb.is_scalar() {
            sa.shape().to_vec()
        } else {
            return Err(Error::shape("elementwise", sa.shape(), sb.shape()));
        };
        let n: usize = shape.iter().product();
        let (da, db) = (sa.data(), sb.data());
        let at = |i: usize| if da.len() == 1 { da[0] } else { da[i] };
        let bt = |i: usize| if db.len() == 1 { db[0] } else { db[i] };
        let out: Vec<f64> = (0..n)
            .map(|i| match op {
                Elementwise::Add => at(i) + bt(i),
                Elementwise::Sub => at(i) - bt(i),
                Elementwise::Mul => at(i) * bt(i),
            })
            .collect();
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, &[a, b], Op::Binary(op, a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(Elementwise::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(Elementwise::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(Elementwise::Mul, a, b)
    }

    /// Multiplies by a constant.
    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let t = self.value(a);
        let out = t.data().iter().map(|x| x * factor).collect();
        let value = Tensor::new(t.shape(), out).expect("same shape");
        self.push(value, &[a], Op::Scale(a, factor))
    }

    /// Multiplies row `i` of a matrix by the constant `factors[i]`.
    pub fn row_scale(&mut self, a: Var, factors: Vec<f64>) -> Result<Var> {
        let (m, n) = self.dims2(a, "row_scale")?;
        if factors.len() != m {
            return Err(Error::shape("row_scale", self.shape(a), &[factors.len()]));
        }
        let src = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = src[i * n + j] * factors[i];
            }
        }
        let value = Tensor::new(&[m, n], out)?;
        Ok(self.push(value, &[a], Op::RowScale(a, factors)))
    }

    /// Adds the bias vector `bias[n]` to every row of `a[m×n]`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims2(a, "add_bias")?;
        if self.value(bias).len() != n || self.shape(bias).len() != 1 {
            return Err(Error::shape("add_bias", self.shape(a), self.shape(bias)));
        }
        let b = self.value(bias).data();
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_exact_mut(n) {
            for (o, bv) in row.iter_mut().zip(b) {
                *o += bv;
            }
        }
        let value = Tensor::new(&[m, n], out)?;
        Ok(self.push(value, &[a, bias], Op::AddBias(a, bias)))
    }

    pub fn activation(&mut self, kind: Activation, x: Var) -> Var {
        let t = self.value(x);
        let out: Vec<f64> = match kind {
            Activation::Sigmoid => t.data().iter().map(|&v| math::sigmoid(v)).collect(),
            Activation::Tanh => t.data().iter().map(|&v| math::tanh(v)).collect(),
            Activation::Relu => t.data().iter().map(|&v| v.max(0.0)).collect(),
        };
        let value = Tensor::new(t.shape(), out).expect("same shape");
        self.push(value, &[x], Op::Act(kind, x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(Activation::Sigmoid, x)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.activation(Activation::Tanh, x)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(Activation::Relu, x)
    }

    // ----- indexing ---------------------------------------------------------

    /// Rows of `table[V×d]` selected by `indices`, as an `indices.len() × d`
    /// matrix. The backward pass scatters into the selected rows only.
    pub fn gather(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let (v, d) = self.dims2(table, "gather")?;
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= v {
                return Err(Error::Index {
                    context: "embedding lookup",
                    index: i,
                    size: v,
                });
            }
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let value = Tensor::new(&[indices.len(), d], out)?;
        Ok(self.push(
            value,
            &[table],
            Op::Gather {
                table,
                indices: indices.to_vec(),
            },
        ))
    }

    /// Row `index` of `table[V×d]` as a `[d]` vector.
    pub fn embedding_lookup(&mut self, table: Var, index: usize) -> Result<Var> {
        let g = self.gather(table, &[index])?;
        let node = &mut self.nodes[g.0];
        let d = node.value.len();
        node.value = node.value.clone().reshape(&[d])?;
        Ok(g)
    }

    /// Flat elements of `input` at `indices`, as a vector.
    pub fn pick(&mut self, input: Var, indices: &[usize]) -> Result<Var> {
        let src = self.value(input).data();
        let mut out = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= src.len() {
                return Err(Error::Index {
                    context: "pick",
                    index: i,
                    size: src.len(),
                });
            }
            out.push(src[i]);
        }
        let value = Tensor::vector(out);
        Ok(self.push(
            value,
            &[input],
            Op::Pick {
                input,
                indices: indices.to_vec(),
            },
        ))
    }

    /// Rows `start..start + len` of a matrix.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims2(a, "slice_rows")?;
        if start + len > m {
            return Err(Error::Index {
                context: "slice_rows",
                index: start + len,
                size: m,
            });
        }
        let out = self.value(a).data()[start * n..(start + len) * n].to_vec();
        let value = Tensor::new(&[len, n], out)?;
        Ok(self.push(value, &[a], Op::SliceRows { input: a, start }))
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims2(a, "slice_cols")?;
        if start + len > n {
            return Err(Error::Index {
                context: "slice_cols",
                index: start + len,
                size: n,
            });
        }
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&src[i * n + start..i * n + start + len]);
        }
        let value = Tensor::new(&[m, len], out)?;
        Ok(self.push(value, &[a], Op::SliceCols { input: a, start }))
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Precondition("concat_rows of nothing".into()))?;
        let (_, n) = self.dims2(first, "concat_rows")?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (m, n2) = self.dims2(p, "concat_rows")?;
            if n2 != n {
                return Err(Error::shape(
                    "concat_rows",
                    self.shape(first),
                    self.shape(p),
                ));
            }
            rows += m;
            out.extend_from_slice(self.value(p).data());
        }
        let value = Tensor::new(&[rows, n], out)?;
        Ok(self.push(value, parts, Op::ConcatRows(parts.to_vec())))
    }

    // ----- normalisation and attention ------------------------------------

    /// Softmax over each row of `scores`, where row `i` only covers its first
    /// `valid[i]` entries; the remaining entries are exactly zero.
    ///
    /// A rank-1 input is treated as a single row.
    pub fn masked_softmax_rows(&mut self, scores: Var, valid: &[usize]) -> Result<Var> {
        let t = self.value(scores);
        let (m, n) = match t.shape() {
            [n] => (1, *n),
            [m, n] => (*m, *n),
            s => return Err(Error::shape("masked_softmax", s, &[])),
        };
        if valid.len() != m {
            return Err(Error::shape("masked_softmax", t.shape(), &[valid.len()]));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let vl = valid[i];
            if vl == 0 || vl > n {
                return Err(Error::Precondition(alloc::format!(
                    "masked_softmax valid length {vl} not in 1..={n}"
                )));
            }
            softmax_prefix(&t.data()[i * n..i * n + vl], &mut out[i * n..i * n + vl]);
        }
        let value = Tensor::new(t.shape(), out)?;
        Ok(self.push(
            value,
            &[scores],
            Op::MaskedSoftmax {
                input: scores,
                valid: valid.to_vec(),
            },
        ))
    }

    /// `masked_softmax(scores[t], valid_len)`.
    pub fn masked_softmax(&mut self, scores: Var, valid_len: usize) -> Result<Var> {
        self.masked_softmax_rows(scores, &[valid_len])
    }

    /// Row-wise layer normalisation with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (m, n) = self.dims2(x, "layer_norm")?;
        if self.value(gamma).len() != n || self.value(beta).len() != n {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let src = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut normalized = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / math::sqrt(var + LAYER_NORM_EPS);
            inv_std[i] = is;
            for j in 0..n {
                let xh = (row[j] - mean) * is;
                normalized[i * n + j] = xh;
                out[i * n + j] = g[j] * xh + b[j];
            }
        }
        let value = Tensor::new(&[m, n], out)?;
        Ok(self.push(
            value,
            &[x, gamma, beta],
            Op::LayerNorm {
                input: x,
                gamma,
                beta,
                normalized,
                inv_std,
            },
        ))
    }

    /// Multi-head causal self-attention over a time-major batch.
    ///
    /// `q`, `k` and `v` are `(steps·batch) × d` with row `t·batch + b`. For
    /// each sequence `b` and head `h`, position `t` attends to positions
    /// `0..=t` with weights `masked_softmax(scale · q_t·k_j)`. Heads split
    /// the columns into `heads` contiguous blocks of `d / heads`.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        shape: AttentionShape,
    ) -> Result<Var> {
        let (rows, d) = self.dims2(q, "causal_attention")?;
        for other in [k, v] {
            if self.shape(other) != self.shape(q) {
                return Err(Error::shape(
                    "causal_attention",
                    self.shape(q),
                    self.shape(other),
                ));
            }
        }
        let AttentionShape {
            steps,
            batch,
            heads,
            scale,
        } = shape;
        if rows != steps * batch || heads == 0 || d % heads != 0 {
            return Err(Error::Precondition(alloc::format!(
                "attention over {rows}×{d} with {steps} steps, batch {batch}, {heads} heads"
            )));
        }
        let dh = d / heads;
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut probs = vec![0.0; batch * heads * steps * steps];
        let mut out = vec![0.0; rows * d];
        let mut scores = vec![0.0; steps];
        for b in 0..batch {
            for h in 0..heads {
                let col = h * dh;
                for t in 0..steps {
                    let qrow = &qd[(t * batch + b) * d + col..][..dh];
                    for j in 0..=t {
                        let krow = &kd[(j * batch + b) * d + col..][..dh];
                        scores[j] = scale * dot(qrow, krow);
                    }
                    let base = ((b * heads + h) * steps + t) * steps;
                    softmax_prefix(&scores[..=t], &mut probs[base..base + t + 1]);
                    let orow = &mut out[(t * batch + b) * d + col..][..dh];
                    for j in 0..=t {
                        let p = probs[base + j];
                        let vrow = &vd[(j * batch + b) * d + col..][..dh];
                        for (o, &vv) in orow.iter_mut().zip(vrow) {
                            *o += p * vv;
                        }
                    }
                }
            }
        }
        let value = Tensor::new(&[rows, d], out)?;
        Ok(self.push(
            value,
            &[q, k, v],
            Op::Attention {
                q,
                k,
                v,
                shape,
                probs,
            },
        ))
    }

    // ----- reductions and losses -------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), &[a], Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.len().max(1) as f64;
        self.push(Tensor::scalar(s), &[a], Op::Mean(a))
    }

    /// Weighted binary cross-entropy `Σ wᵢ·bce(pᵢ, yᵢ) / Σ wᵢ` with
    /// probabilities clamped to `[PROB_EPS, 1 − PROB_EPS]`. Zero when all
    /// weights are zero.
    pub fn bce(&mut self, pred: Var, targets: Vec<f64>, weights: Vec<f64>) -> Result<Var> {
        let p = self.value(pred).data();
        if targets.len() != p.len() || weights.len() != p.len() {
            return Err(Error::shape(
                "bce",
                self.shape(pred),
                &[targets.len(), weights.len()],
            ));
        }
        let denom: f64 = weights.iter().sum();
        let mut total = 0.0;
        for i in 0..p.len() {
            if weights[i] == 0.0 {
                continue;
            }
            let pc = p[i].clamp(PROB_EPS, 1.0 - PROB_EPS);
            let y = targets[i];
            total -= weights[i] * (y * math::ln(pc) + (1.0 - y) * math::ln(1.0 - pc));
        }
        let loss = if denom > 0.0 { total / denom } else { 0.0 };
        Ok(self.push(
            Tensor::scalar(loss),
            &[pred],
            Op::Bce {
                pred,
                targets,
                weights,
                denom,
            },
        ))
    }

    /// Weighted squared error `Σ wᵢ·(yᵢ − pᵢ)² / Σ wᵢ`; zero when all weights
    /// are zero.
    pub fn mse(&mut self, pred: Var, targets: Vec<f64>, weights: Vec<f64>) -> Result<Var> {
        let p = self.value(pred).data();
        if targets.len() != p.len() || weights.len() != p.len() {
            return Err(Error::shape(
                "mse",
                self.shape(pred),
                &[targets.len(), weights.len()],
            ));
        }
        let denom: f64 = weights.iter().sum();
        let total: f64 = (0..p.len())
            .filter(|&i| weights[i] != 0.0)
            .map(|i| weights[i] * (targets[i] - p[i]) * (targets[i] - p[i]))
            .sum();
        let loss = if denom > 0.0 { total / denom } else { 0.0 };
        Ok(self.push(
            Tensor::scalar(loss),
            &[pred],
            Op::Mse {
                pred,
                targets,
                weights,
                denom,
            },
        ))
    }

    // ----- backward ---------------------------------------------------------

    /// Accumulates `∂loss/∂leaf` into every reachable trainable leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Precondition(alloc::format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        grads[loss.0] = Some(vec![1.0]);
        let mut leaf_grads = Vec::new();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                leaf_grads.push((i, g));
            } else {
                self.propagate(i, &g, &mut grads);
            }
        }
        for (i, g) in leaf_grads {
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let node = &nodes[i];
        macro_rules! slot {
            ($v:expr) => {
                grad_slot(nodes, grads, $v)
            };
        }
        match &node.op {
            Op::Leaf => unreachable!("leaves are handled by the caller"),
            Op::MatMul(a, b) => {
                let (m, k) = nodes[a.0].value.dims2().unwrap();
                let n = node.value.dims2().unwrap().1;
                if let Some(ga) = slot!(*a) {
                    // ga[m×k] += g[m×n] · bᵀ
                    let bt = transpose(nodes[b.0].value.data(), k, n);
                    gemm_acc(g, &bt, ga, m, n, k);
                }
                if let Some(gb) = slot!(*b) {
                    gemm_tn_acc(nodes[a.0].value.data(), g, gb, m, k, n);
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = nodes[a.0].value.dims2().unwrap();
                let n = node.value.dims2().unwrap().1;
                if let Some(ga) = slot!(*a) {
                    // ga[m×k] += g[m×n] · b[n×k]
                    gemm_acc(g, nodes[b.0].value.data(), ga, m, n, k);
                }
                if let Some(gb) = slot!(*b) {
                    // gb[n×k] += gᵀ · a
                    gemm_tn_acc(g, nodes[a.0].value.data(), gb, m, n, k);
                }
            }
            Op::Transpose(a) => {
                let (m, n) = nodes[a.0].value.dims2().unwrap();
                if let Some(ga) = slot!(*a) {
                    // g is n×m
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * n + j] += g[j * m + i];
                        }
                    }
                }
            }
            Op::Binary(op, a, b) => {
                let da = nodes[a.0].value.data();
                let db = nodes[b.0].value.data();
                let at = |j: usize| if da.len() == 1 { da[0] } else { da[j] };
                let bt = |j: usize| if db.len() == 1 { db[0] } else { db[j] };
                let (ca, cb): (Vec<f64>, Vec<f64>) = match op {
                    Elementwise::Add => (g.to_vec(), g.to_vec()),
                    Elementwise::Sub => (g.to_vec(), g.iter().map(|x| -x).collect()),
                    Elementwise::Mul => (
                        g.iter().enumerate().map(|(j, x)| x * bt(j)).collect(),
                        g.iter().enumerate().map(|(j, x)| x * at(j)).collect(),
                    ),
                };
                if let Some(ga) = slot!(*a) {
                    accumulate_broadcast(ga, &ca);
                }
                if let Some(gb) = slot!(*b) {
                    accumulate_broadcast(gb, &cb);
                }
            }
            Op::Scale(a, f) => {
                if let Some(ga) = slot!(*a) {
                    ga.iter_mut().zip(g).for_each(|(o, x)| *o += x * f);
                }
            }
            Op::RowScale(a, factors) => {
                let n = node.value.dims2().unwrap().1;
                if let Some(ga) = slot!(*a) {
                    for (r, f) in factors.iter().enumerate() {
                        for j in 0..n {
                            ga[r * n + j] += g[r * n + j] * f;
                        }
                    }
                }
            }
            Op::AddBias(a, bias) => {
                let n = node.value.dims2().unwrap().1;
                if let Some(ga) = slot!(*a) {
                    ga.iter_mut().zip(g).for_each(|(o, x)| *o += x);
                }
                if let Some(gb) = slot!(*bias) {
                    for row in g.chunks_exact(n) {
                        gb.iter_mut().zip(row).for_each(|(o, x)| *o += x);
                    }
                }
            }
            Op::Act(kind, x) => {
                let y = node.value.data();
                let xd = nodes[x.0].value.data();
                if let Some(gx) = slot!(*x) {
                    for j in 0..g.len() {
                        let d = match kind {
                            Activation::Sigmoid => y[j] * (1.0 - y[j]),
                            Activation::Tanh => 1.0 - y[j] * y[j],
                            Activation::Relu => {
                                if xd[j] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                        };
                        gx[j] += g[j] * d;
                    }
                }
            }
            Op::Gather { table, indices } => {
                let d = nodes[table.0].value.dims2().unwrap().1;
                if let Some(gt) = slot!(*table) {
                    for (r, &idx) in indices.iter().enumerate() {
                        let src = &g[r * d..(r + 1) * d];
                        gt[idx * d..(idx + 1) * d]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(o, x)| *o += x);
                    }
                }
            }
            Op::MaskedSoftmax { input, valid } => {
                let n = *node.value.shape().last().unwrap();
                let y = node.value.data();
                if let Some(gi) = slot!(*input) {
                    for (r, &vl) in valid.iter().enumerate() {
                        let ys = &y[r * n..r * n + vl];
                        let gs = &g[r * n..r * n + vl];
                        let inner: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                        for j in 0..vl {
                            gi[r * n + j] += ys[j] * (gs[j] - inner);
                        }
                    }
                }
            }
            Op::SliceRows { input, start } => {
                let n = node.value.dims2().unwrap().1;
                if let Some(gi) = slot!(*input) {
                    gi[start * n..start * n + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(o, x)| *o += x);
                }
            }
            Op::SliceCols { input, start } => {
                let (m, len) = node.value.dims2().unwrap();
                let n = nodes[input.0].value.dims2().unwrap().1;
                if let Some(gi) = slot!(*input) {
                    for r in 0..m {
                        for j in 0..len {
                            gi[r * n + start + j] += g[r * len + j];
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = nodes[p.0].value.len();
                    if let Some(gp) = slot!(*p) {
                        gp.iter_mut()
                            .zip(&g[offset..offset + len])
                            .for_each(|(o, x)| *o += x);
                    }
                    offset += len;
                }
            }
            Op::LayerNorm {
                input,
                gamma,
                beta,
                normalized,
                inv_std,
            } => {
                let (m, n) = node.value.dims2().unwrap();
                let gam = nodes[gamma.0].value.data();
                if let Some(gg) = slot!(*gamma) {
                    for r in 0..m {
                        for j in 0..n {
                            gg[j] += g[r * n + j] * normalized[r * n + j];
                        }
                    }
                }
                if let Some(gb) = slot!(*beta) {
                    for row in g.chunks_exact(n) {
                        gb.iter_mut().zip(row).for_each(|(o, x)| *o += x);
                    }
                }
                if let Some(gx) = slot!(*input) {
                    let mut dxh = vec![0.0; n];
                    for r in 0..m {
                        let xh = &normalized[r * n..(r + 1) * n];
                        for j in 0..n {
                            dxh[j] = g[r * n + j] * gam[j];
                        }
                        let s1: f64 = dxh.iter().sum();
                        let s2: f64 = dxh.iter().zip(xh).map(|(a, b)| a * b).sum();
                        let c = inv_std[r] / n as f64;
                        for j in 0..n {
                            gx[r * n + j] += c * (n as f64 * dxh[j] - s1 - xh[j] * s2);
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                shape,
                probs,
            } => {
                self.attention_backward(g, *q, *k, *v, shape, probs, grads);
            }
            Op::Pick { input, indices } => {
                if let Some(gi) = slot!(*input) {
                    for (r, &idx) in indices.iter().enumerate() {
                        gi[idx] += g[r];
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = slot!(*a) {
                    ga.iter_mut().for_each(|o| *o += g[0]);
                }
            }
            Op::Mean(a) => {
                let n = nodes[a.0].value.len().max(1) as f64;
                if let Some(ga) = slot!(*a) {
                    ga.iter_mut().for_each(|o| *o += g[0] / n);
                }
            }
            Op::Bce {
                pred,
                targets,
                weights,
                denom,
            } => {
                if *denom <= 0.0 {
                    return;
                }
                let p = nodes[pred.0].value.data();
                if let Some(gp) = slot!(*pred) {
                    for i in 0..p.len() {
                        if weights[i] == 0.0 || p[i] < PROB_EPS || p[i] > 1.0 - PROB_EPS {
                            continue;
                        }
                        let y = targets[i];
                        let d = -y / p[i] + (1.0 - y) / (1.0 - p[i]);
                        gp[i] += g[0] * weights[i] * d / denom;
                    }
                }
            }
            Op::Mse {
                pred,
                targets,
                weights,
                denom,
            } => {
                if *denom <= 0.0 {
                    return;
                }
                let p = nodes[pred.0].value.data();
                if let Some(gp) = slot!(*pred) {
                    for i in 0..p.len() {
                        if weights[i] == 0.0 {
                            continue;
                        }
                        gp[i] += g[0] * weights[i] * 2.0 * (p[i] - targets[i]) / denom;
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &[f64],
        q: Var,
        k: Var,
        v: Var,
        shape: &AttentionShape,
        probs: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let nodes = &self.nodes;
        let (rows, d) = nodes[q.0].value.dims2().unwrap();
        let AttentionShape {
            steps,
            batch,
            heads,
            scale,
        } = *shape;
        let dh = d / heads;
        let (qd, kd, vd) = (
            nodes[q.0].value.data(),
            nodes[k.0].value.data(),
            nodes[v.0].value.data(),
        );
        let mut gq = vec![0.0; rows * d];
        let mut gk = vec![0.0; rows * d];
        let mut gv = vec![0.0; rows * d];
        let mut dp = vec![0.0; steps];
        for b in 0..batch {
            for h in 0..heads {
                let col = h * dh;
                for t in 0..steps {
                    let base = ((b * heads + h) * steps + t) * steps;
                    let p = &probs[base..base + t + 1];
                    let go = &g[(t * batch + b) * d + col..][..dh];
                    for j in 0..=t {
                        let r = (j * batch + b) * d + col;
                        dp[j] = dot(go, &vd[r..r + dh]);
                        for (o, &x) in gv[r..r + dh].iter_mut().zip(go) {
                            *o += p[j] * x;
                        }
                    }
                    let inner: f64 = (0..=t).map(|j| p[j] * dp[j]).sum();
                    let rq = (t * batch + b) * d + col;
                    for j in 0..=t {
                        let ds = p[j] * (dp[j] - inner) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let r = (j * batch + b) * d + col;
                        for e in 0..dh {
                            gq[rq + e] += ds * kd[r + e];
                            gk[r + e] += ds * qd[rq + e];
                        }
                    }
                }
            }
        }
        for (var, contrib) in [(q, gq), (k, gk), (v, gv)] {
            if !nodes[var.0].requires_grad {
                continue;
            }
            let len = nodes[var.0].value.len();
            let slot = grads[var.0].get_or_insert_with(|| vec![0.0; len]);
            slot.iter_mut().zip(&contrib).for_each(|(o, x)| *o += x);
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Numerically stable softmax of `scores` into `out`.
fn softmax_prefix(scores: &[f64], out: &mut [f64]) {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &s) in out.iter_mut().zip(scores) {
        let e = math::exp((s - max).max(-math::EXP_CLAMP));
        *o = e;
        total += e;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

fn accumulate_broadcast(acc: &mut [f64], contrib: &[f64]) {
    if acc.len() == contrib.len() {
        acc.iter_mut().zip(contrib).for_each(|(o, x)| *o += x);
    } else {
        acc[0] += contrib.iter().sum::<f64>();
    }
}

fn grad_slot<'g>(
    nodes: &[Node],
    grads: &'g mut [Option<Vec<f64>>],
    v: Var,
) -> Option<&'g mut Vec<f64>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let len = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn matmul_examples() {
        let mut tape = Tape::new();
        let i2 = tape.constant(Tensor::identity(2));
        let col = tape.constant(Tensor::from_rows(&[&[3.0], &[4.0]]));
        let out = tape.matmul(i2, col).unwrap();
        assert_eq!(tape.value(out).data(), &[3.0, 4.0]);

        let row = tape.constant(Tensor::from_rows(&[&[1.0, 2.0]]));
        let out = tape.matmul(row, col).unwrap();
        assert_eq!(tape.value(out).data(), &[11.0]);
        assert_eq!(tape.shape(out), &[1, 1]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        match tape.matmul(a, b) {
            Err(Error::Shape { lhs, rhs, .. }) => {
                assert_eq!(lhs, [2, 3]);
                assert_eq!(rhs, [2, 3]);
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn elementwise_examples() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let b = tape.constant(Tensor::vector(vec![3.0, 4.0]));
        let s = tape.add(a, b).unwrap();
        assert_eq!(tape.value(s).data(), &[4.0, 6.0]);

        let z = tape.constant(Tensor::zeros(&[2]));
        let m = tape.mul(a, z).unwrap();
        assert_eq!(tape.value(m).data(), &[0.0, 0.0]);
        let l = tape.sum(m);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[0.0, 0.0]);

        let d = tape.sub(a, a).unwrap();
        assert_eq!(tape.value(d).data(), &[0.0, 0.0]);

        let c = tape.constant(Tensor::zeros(&[3]));
        assert!(matches!(tape.add(a, c), Err(Error::Shape { .. })));
    }

    #[test]
    fn scalar_broadcast_is_the_only_broadcast() {
        let mut tape = Tape::new();
        let s = tape.leaf(Tensor::scalar(2.0));
        let v = tape.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let p = tape.mul(s, v).unwrap();
        assert_eq!(tape.value(p).data(), &[2.0, 4.0, 6.0]);
        let l = tape.sum(p);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(s).unwrap(), &[6.0]);
        assert_eq!(tape.grad(v).unwrap(), &[2.0, 2.0, 2.0]);

        let row = tape.constant(Tensor::zeros(&[1, 3]));
        assert!(tape.add(row, v).is_err());
    }

    #[test]
    fn activation_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![0.0, -3.2]));
        let s = tape.sigmoid(x);
        let r = tape.relu(x);
        assert_eq!(tape.value(s).data()[0], 0.5);
        assert_eq!(tape.value(r).data()[1], 0.0);
        let big = tape.constant(Tensor::vector(vec![1e6, -1e6]));
        let s = tape.sigmoid(big);
        assert!(tape.value(s).all_finite());
        assert!(close(tape.value(s).data()[0], 1.0, 1e-13));
        assert!(tape.value(s).data()[1] > 0.0);
    }

    #[test]
    fn masked_softmax_examples() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::vector(vec![5.0, 123.0]));
        let p = tape.masked_softmax(a, 1).unwrap();
        assert_eq!(tape.value(p).data(), &[1.0, 0.0]);

        let a = tape.constant(Tensor::vector(vec![0.0; 3]));
        let p = tape.masked_softmax(a, 3).unwrap();
        for &v in tape.value(p).data() {
            assert!(close(v, 1.0 / 3.0, 1e-15));
        }

        let a = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        let p = tape.masked_softmax(a, 2).unwrap();
        let e1 = 1f64.exp();
        let e2 = 2f64.exp();
        assert!(close(tape.value(p).data()[0], e1 / (e1 + e2), 1e-15));
        assert!(close(tape.value(p).data()[0], 0.2689, 1e-4));
        assert!(close(tape.value(p).data()[1], 0.7311, 1e-4));

        assert!(matches!(
            tape.masked_softmax(a, 0),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn embedding_lookup_examples() {
        let mut tape = Tape::new();
        let table = tape.leaf(Tensor::identity(3));
        let row = tape.embedding_lookup(table, 1).unwrap();
        assert_eq!(tape.value(row).data(), &[0.0, 1.0, 0.0]);
        assert_eq!(tape.shape(row), &[3]);
        match tape.embedding_lookup(table, 3) {
            Err(Error::Index {
                index: 3, size: 3, ..
            }) => {}
            other => panic!("expected index error, got {other:?}"),
        }

        // Two lookups of the same row accumulate both gradients.
        let r1 = tape.embedding_lookup(table, 2).unwrap();
        let r2 = tape.embedding_lookup(table, 2).unwrap();
        let g1 = tape.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let g2 = tape.constant(Tensor::vector(vec![10.0, 20.0, 30.0]));
        let p1 = tape.mul(r1, g1).unwrap();
        let p2 = tape.mul(r2, g2).unwrap();
        let s = tape.add(p1, p2).unwrap();
        let l = tape.sum(s);
        tape.backward(l).unwrap();
        let g = tape.grad(table).unwrap();
        assert_eq!(&g[6..9], &[11.0, 22.0, 33.0]);
        assert!(g[..6].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_examples() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let l = tape.sum(x);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
        // Accumulates without zeroing.
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 2.0, 2.0]);
        tape.zero_grads();
        assert!(tape.grad(x).is_none());

        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let sq = tape.mul(x, x).unwrap();
        let l = tape.sum(sq);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0]);

        assert!(matches!(tape.backward(sq), Err(Error::Precondition(_))));
    }

    #[test]
    fn losses_handle_empty_masks() {
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::vector(vec![0.3, 0.7]));
        let l = tape.bce(p, vec![1.0, 0.0], vec![0.0, 0.0]).unwrap();
        assert_eq!(tape.value(l).data(), &[0.0]);
        tape.backward(l).unwrap();
        assert!(tape.grad(p).is_none_or(|g| g.iter().all(|&v| v == 0.0)));

        let l = tape.bce(p, vec![0.5, 0.5], vec![1.0, 1.0]).unwrap();
        let half = tape.value(l).data()[0];
        assert!(half > 0.0);
        let m = tape.mse(p, vec![0.3, 0.7], vec![1.0, 1.0]).unwrap();
        assert_eq!(tape.value(m).data(), &[0.0]);
    }
}
