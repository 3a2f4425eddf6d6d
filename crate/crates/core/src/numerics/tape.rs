//! Reverse-mode gradient tape over dense matrices.
//!
//! The primitive set is closed; every model in the crate is composed from it:
//!
//! | primitive | forward | notes |
//! |---|---|---|
//! | `matmul`, `matmul_nt` | `a·b`, `a·bᵀ` | |
//! | `add`, `sub`, `add_row` | elementwise; `add_row` broadcasts a `[1,n]` row | |
//! | `mul`, `scale`, `affine` | elementwise product, constant scale/shift | |
//! | `map` | elementwise nonlinearity ([`Unary`]) | |
//! | `sum`, `mean`, `row_sum` | reductions | |
//! | `gather_rows` | row lookup (embeddings, codewords) | duplicate indices accumulate |
//! | `concat_cols`, `slice_cols` | column concat / slice | |
//! | `causal_softmax` | row softmax with a causal mask | |
//! | `layer_norm` | per-row normalization with gain/bias | |
//! | `cross_entropy` | weighted softmax cross-entropy over rows | |
//! | `pick_log_prob` | `log softmax(row)[target]` per row | |
//! | `weighted_sum` | `Σ wᵢ aᵢ` with constant weights | |
//! | `detach` | stop-gradient copy | |
//!
//! Gradients accumulate additively across fan-out.

use std::borrow::Cow;

use super::tensor::{dot, matmul_acc, matmul_nt_acc, matmul_tn_acc};
use super::{NumericsError, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise nonlinearities understood by [`Tape::map`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Tanh,
    Relu,
    /// tanh approximation
    Gelu,
    Sigmoid,
    Exp,
    Square,
    Sin,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

impl Unary {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Tanh => x.tanh(),
            Unary::Relu => x.max(0.0),
            Unary::Gelu => 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()),
            Unary::Sigmoid => 1.0 / (1.0 + (-x).exp()),
            Unary::Exp => x.exp(),
            Unary::Square => x * x,
            Unary::Sin => x.sin(),
        }
    }

    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Tanh => 1.0 - y * y,
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Gelu => {
                let u = GELU_C * (x + 0.044715 * x * x * x);
                let t = u.tanh();
                let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
            }
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Exp => y,
            Unary::Square => 2.0 * x,
            Unary::Sin => x.cos(),
        }
    }
}

enum Op {
    Leaf,
    MatMul { a: Var, b: Var, transpose_b: bool },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    AddRow { a: Var, row: Var },
    Mul { a: Var, b: Var },
    Affine { a: Var, scale: f64 },
    Map { a: Var, f: Unary },
    Sum { a: Var },
    Mean { a: Var },
    RowSum { a: Var },
    Gather { table: Var, indices: Vec<usize> },
    ConcatCols { parts: Vec<Var> },
    SliceCols { a: Var, start: usize },
    CausalSoftmax { a: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    CrossEntropy { logits: Var, targets: Vec<(usize, usize, f64)>, probs: Vec<f64> },
    PickLogProb { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
    WeightedSum { a: Var, weights: Vec<f64> },
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of primitive applications. Nodes are appended in
/// evaluation order, so every node's inputs precede it.
#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

/// Gradients of one scalar output, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Gradient as a tensor; exactly zero when `v` does not influence the output.
    pub fn wrt(&self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).unwrap_or_else(|_| Tensor::zeros(&self.shapes[v.0])),
            None => Tensor::zeros(&shape),
        }
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads[v.0].take()
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> NumericsError {
    NumericsError::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn dims(op: &'static str, t: &Tensor) -> Result<(usize, usize), NumericsError> {
    t.dims().ok_or_else(|| NumericsError::ShapeMismatch {
        op,
        left: t.shape().to_vec(),
        right: vec![],
    })
}

fn acc(slot: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; len])
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Differentiable leaf borrowing its value.
    pub fn param(&mut self, t: &'a Tensor) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(t),
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param_owned(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn constant_ref(&mut self, t: &'a Tensor) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(t),
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Stop-gradient: same value, no gradient path.
    pub fn detach(&mut self, a: Var) -> Var {
        let v = self.value(a).clone();
        self.constant(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = dims("matmul", ta)?;
        let (k2, n) = dims("matmul", tb)?;
        if k != k2 {
            return Err(mismatch("matmul", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        matmul_acc(ta.data(), tb.data(), m, k, n, &mut out);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(
            Tensor::from_parts(m, n, out),
            Op::MatMul {
                a,
                b,
                transpose_b: false,
            },
            ng,
        ))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = dims("matmul_nt", ta)?;
        let (n, k2) = dims("matmul_nt", tb)?;
        if k != k2 {
            return Err(mismatch("matmul_nt", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        matmul_nt_acc(ta.data(), tb.data(), m, k, n, &mut out);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(
            Tensor::from_parts(m, n, out),
            Op::MatMul {
                a,
                b,
                transpose_b: true,
            },
            ng,
        ))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize), NumericsError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let da = dims(op, ta)?;
        if Some(da) != tb.dims() {
            return Err(mismatch(op, ta, tb));
        }
        Ok(da)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (r, c) = self.same_shape("add", a, b)?;
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::from_parts(r, c, out), Op::Add { a, b }, ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (r, c) = self.same_shape("sub", a, b)?;
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::from_parts(r, c, out), Op::Sub { a, b }, ng))
    }

    /// Adds a `[1, n]` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, NumericsError> {
        let (ta, tr) = (self.value(a), self.value(row));
        let (r, c) = dims("add_row", ta)?;
        if tr.dims() != Some((1, c)) {
            return Err(mismatch("add_row", ta, tr));
        }
        let bias = tr.data();
        let mut out = ta.data().to_vec();
        for chunk in out.chunks_mut(c) {
            for (o, b) in chunk.iter_mut().zip(bias) {
                *o += b;
            }
        }
        let ng = self.ng(a) || self.ng(row);
        Ok(self.push(Tensor::from_parts(r, c, out), Op::AddRow { a, row }, ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (r, c) = self.same_shape("mul", a, b)?;
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::from_parts(r, c, out), Op::Mul { a, b }, ng))
    }

    /// `scale * a + shift` with constants.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Result<Var, NumericsError> {
        let (r, c) = dims("affine", self.value(a))?;
        let out: Vec<f64> = self.value(a).data().iter().map(|x| scale * x + shift).collect();
        let ng = self.ng(a);
        Ok(self.push(Tensor::from_parts(r, c, out), Op::Affine { a, scale }, ng))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var, NumericsError> {
        self.affine(a, factor, 0.0)
    }

    pub fn map(&mut self, a: Var, f: Unary) -> Result<Var, NumericsError> {
        let (r, c) = dims("map", self.value(a))?;
        let out: Vec<f64> = self.value(a).data().iter().map(|&x| f.apply(x)).collect();
        if out.iter().any(|v| !v.is_finite()) {
            return Err(NumericsError::NonFinite {
                context: format!("map {f:?}"),
            });
        }
        let ng = self.ng(a);
        Ok(self.push(Tensor::from_parts(r, c, out), Op::Map { a, f }, ng))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, NumericsError> {
        dims("sum", self.value(a))?;
        let s: f64 = self.value(a).data().iter().sum();
        let ng = self.ng(a);
        Ok(self.push(Tensor::from_parts(1, 1, vec![s]), Op::Sum { a }, ng))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, NumericsError> {
        dims("mean", self.value(a))?;
        let t = self.value(a);
        let s: f64 = t.data().iter().sum::<f64>() / t.len() as f64;
        let ng = self.ng(a);
        Ok(self.push(Tensor::from_parts(1, 1, vec![s]), Op::Mean { a }, ng))
    }

    /// `[r, c] -> [r, 1]`
    pub fn row_sum(&mut self, a: Var) -> Result<Var, NumericsError> {
        let (r, c) = dims("row_sum", self.value(a))?;
        let out: Vec<f64> = self.value(a).data().chunks(c).map(|ch| ch.iter().sum()).collect();
        let ng = self.ng(a);
        Ok(self.push(Tensor::from_parts(r, 1, out), Op::RowSum { a }, ng))
    }

    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var, NumericsError> {
        let t = self.value(table);
        let (r, c) = dims("gather_rows", t)?;
        if indices.is_empty() {
            return Err(NumericsError::ShapeMismatch {
                op: "gather_rows",
                left: t.shape().to_vec(),
                right: vec![0],
            });
        }
        let mut out = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            if i >= r {
                return Err(NumericsError::IndexOutOfRange {
                    op: "gather_rows",
                    index: i,
                    bound: r,
                });
            }
            out.extend_from_slice(t.row_slice(i));
        }
        let ng = self.ng(table);
        Ok(self.push(
            Tensor::from_parts(indices.len(), c, out),
            Op::Gather {
                table,
                indices: indices.to_vec(),
            },
            ng,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let first = parts.first().ok_or(NumericsError::Ragged)?;
        let rows = dims("concat_cols", self.value(*first))?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = dims("concat_cols", self.value(p))?;
            if r != rows {
                return Err(mismatch("concat_cols", self.value(*first), self.value(p)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for i in 0..rows {
                out[i * total + offset..i * total + offset + w].copy_from_slice(&src[i * w..(i + 1) * w]);
            }
            offset += w;
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(
            Tensor::from_parts(rows, total, out),
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            ng,
        ))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var, NumericsError> {
        let t = self.value(a);
        let (r, c) = dims("slice_cols", t)?;
        if len == 0 || start + len > c {
            return Err(NumericsError::IndexOutOfRange {
                op: "slice_cols",
                index: start + len,
                bound: c,
            });
        }
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&t.data()[i * c + start..i * c + start + len]);
        }
        let ng = self.ng(a);
        Ok(self.push(Tensor::from_parts(r, len, out), Op::SliceCols { a, start }, ng))
    }

    /// Row softmax where row `i` only sees columns `0..=i + (cols - rows)`.
    ///
    /// With a square input this is the usual causal attention mask; wider
    /// inputs model queries appended after a cached prefix.
    pub fn causal_softmax(&mut self, a: Var) -> Result<Var, NumericsError> {
        let t = self.value(a);
        let (r, c) = dims("causal_softmax", t)?;
        if c < r {
            return Err(mismatch("causal_softmax", t, t));
        }
        let offset = c - r;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let visible = i + offset + 1;
            let row = &t.data()[i * c..i * c + visible];
            softmax_into(row, &mut out[i * c..i * c + visible]);
        }
        let ng = self.ng(a);
        Ok(self.push(Tensor::from_parts(r, c, out), Op::CausalSoftmax { a }, ng))
    }

    /// Per-row `gain * (x - mean) / sqrt(var + eps) + bias`; gain and bias are `[1, c]`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var, NumericsError> {
        let tx = self.value(x);
        let (r, c) = dims("layer_norm", tx)?;
        for p in [gain, bias] {
            if self.value(p).dims() != Some((1, c)) {
                return Err(mismatch("layer_norm", tx, self.value(p)));
            }
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &tx.data()[i * c..(i + 1) * c];
            let (mu, var) = mean_var(row);
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                let h = (row[j] - mu) * is;
                xhat[i * c + j] = h;
                out[i * c + j] = g[j] * h + b[j];
            }
        }
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        Ok(self.push(
            Tensor::from_parts(r, c, out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            ng,
        ))
    }

    /// `Σ w · (−log softmax(logits[row])[target])` over the listed `(row, target, weight)` triples.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[(usize, usize, f64)]) -> Result<Var, NumericsError> {
        let t = self.value(logits);
        let (r, c) = dims("cross_entropy", t)?;
        let mut probs = vec![0.0; targets.len() * c];
        let mut loss = 0.0;
        for (k, &(row, target, w)) in targets.iter().enumerate() {
            if row >= r || target >= c {
                return Err(NumericsError::IndexOutOfRange {
                    op: "cross_entropy",
                    index: if row >= r { row } else { target },
                    bound: if row >= r { r } else { c },
                });
            }
            let p = &mut probs[k * c..(k + 1) * c];
            let lse = log_softmax_parts(t.row_slice(row), p);
            loss += w * (lse - t.get(row, target));
        }
        let ng = self.ng(logits);
        Ok(self.push(
            Tensor::from_parts(1, 1, vec![loss]),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            ng,
        ))
    }

    /// `[r, c] -> [r, 1]` of `log softmax(row)[targets[row]]`.
    pub fn pick_log_prob(&mut self, logits: Var, targets: &[usize]) -> Result<Var, NumericsError> {
        let t = self.value(logits);
        let (r, c) = dims("pick_log_prob", t)?;
        if targets.len() != r {
            return Err(NumericsError::ShapeMismatch {
                op: "pick_log_prob",
                left: t.shape().to_vec(),
                right: vec![targets.len()],
            });
        }
        let mut probs = vec![0.0; r * c];
        let mut out = vec![0.0; r];
        for (i, &tg) in targets.iter().enumerate() {
            if tg >= c {
                return Err(NumericsError::IndexOutOfRange {
                    op: "pick_log_prob",
                    index: tg,
                    bound: c,
                });
            }
            let lse = log_softmax_parts(t.row_slice(i), &mut probs[i * c..(i + 1) * c]);
            out[i] = t.get(i, tg) - lse;
        }
        let ng = self.ng(logits);
        Ok(self.push(
            Tensor::from_parts(r, 1, out),
            Op::PickLogProb {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            ng,
        ))
    }

    /// `Σ wᵢ aᵢ` over all elements with constant weights.
    pub fn weighted_sum(&mut self, a: Var, weights: &[f64]) -> Result<Var, NumericsError> {
        let t = self.value(a);
        if weights.len() != t.len() {
            return Err(NumericsError::ShapeMismatch {
                op: "weighted_sum",
                left: t.shape().to_vec(),
                right: vec![weights.len()],
            });
        }
        let s = dot(t.data(), weights);
        let ng = self.ng(a);
        Ok(self.push(
            Tensor::from_parts(1, 1, vec![s]),
            Op::WeightedSum {
                a,
                weights: weights.to_vec(),
            },
            ng,
        ))
    }

    /// Reverse sweep from a one-element output.
    pub fn backward(&self, out: Var) -> Result<Gradients, NumericsError> {
        let n = self.nodes.len();
        let shapes: Vec<Vec<usize>> = self.nodes.iter().map(|nd| nd.value.shape().to_vec()).collect();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        if self.value(out).len() != 1 {
            return Err(NumericsError::NonScalarOutput {
                shape: self.value(out).shape().to_vec(),
            });
        }
        grads[out.0] = Some(vec![1.0]);
        for idx in (0..=out.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) || !node.needs_grad {
                grads[i] = None;
            }
        }
        if grads.iter().flatten().any(|g| g.iter().any(|v| !v.is_finite())) {
            return Err(NumericsError::NonFinite {
                context: "backward pass".into(),
            });
        }
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, transpose_b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = ta.dims().unwrap();
                let n = out.cols();
                if self.ng(*a) {
                    let ga = acc(&mut grads[a.0], m * k);
                    if *transpose_b {
                        // b is [n,k]
                        matmul_acc(g, tb.data(), m, n, k, ga);
                    } else {
                        matmul_nt_acc(g, tb.data(), m, n, k, ga);
                    }
                }
                if self.ng(*b) {
                    let gb = acc(&mut grads[b.0], k * n);
                    if *transpose_b {
                        matmul_tn_acc(g, ta.data(), m, n, k, gb);
                    } else {
                        matmul_tn_acc(ta.data(), g, m, k, n, gb);
                    }
                }
            }
            Op::Add { a, b } => {
                for v in [a, b] {
                    if self.ng(*v) {
                        let gv = acc(&mut grads[v.0], g.len());
                        gv.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Sub { a, b } => {
                if self.ng(*a) {
                    let gv = acc(&mut grads[a.0], g.len());
                    gv.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if self.ng(*b) {
                    let gv = acc(&mut grads[b.0], g.len());
                    gv.iter_mut().zip(g).for_each(|(x, y)| *x -= y);
                }
            }
            Op::AddRow { a, row } => {
                if self.ng(*a) {
                    let gv = acc(&mut grads[a.0], g.len());
                    gv.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if self.ng(*row) {
                    let c = out.cols();
                    let gr = acc(&mut grads[row.0], c);
                    for chunk in g.chunks(c) {
                        gr.iter_mut().zip(chunk).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Mul { a, b } => {
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                if self.ng(*a) {
                    let gv = acc(&mut grads[a.0], g.len());
                    for i in 0..g.len() {
                        gv[i] += g[i] * tb[i];
                    }
                }
                if self.ng(*b) {
                    let gv = acc(&mut grads[b.0], g.len());
                    for i in 0..g.len() {
                        gv[i] += g[i] * ta[i];
                    }
                }
            }
            Op::Affine { a, scale } => {
                let gv = acc(&mut grads[a.0], g.len());
                gv.iter_mut().zip(g).for_each(|(x, y)| *x += scale * y);
            }
            Op::Map { a, f } => {
                let x = self.value(*a).data();
                let y = out.data();
                let gv = acc(&mut grads[a.0], g.len());
                for i in 0..g.len() {
                    gv[i] += g[i] * f.derivative(x[i], y[i]);
                }
            }
            Op::Sum { a } => {
                let len = self.value(*a).len();
                let gv = acc(&mut grads[a.0], len);
                gv.iter_mut().for_each(|x| *x += g[0]);
            }
            Op::Mean { a } => {
                let len = self.value(*a).len();
                let s = g[0] / len as f64;
                let gv = acc(&mut grads[a.0], len);
                gv.iter_mut().for_each(|x| *x += s);
            }
            Op::RowSum { a } => {
                let (r, c) = self.value(*a).dims().unwrap();
                let gv = acc(&mut grads[a.0], r * c);
                for i in 0..r {
                    gv[i * c..(i + 1) * c].iter_mut().for_each(|x| *x += g[i]);
                }
            }
            Op::Gather { table, indices } => {
                let t = self.value(*table);
                let c = t.cols();
                let gt = acc(&mut grads[table.0], t.len());
                for (k, &i) in indices.iter().enumerate() {
                    let dst = &mut gt[i * c..(i + 1) * c];
                    dst.iter_mut().zip(&g[k * c..(k + 1) * c]).for_each(|(x, y)| *x += y);
                }
            }
            Op::ConcatCols { parts } => {
                let rows = out.rows();
                let total = out.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.ng(p) {
                        let gp = acc(&mut grads[p.0], rows * w);
                        for i in 0..rows {
                            let src = &g[i * total + offset..i * total + offset + w];
                            gp[i * w..(i + 1) * w].iter_mut().zip(src).for_each(|(x, y)| *x += y);
                        }
                    }
                    offset += w;
                }
            }
            Op::SliceCols { a, start } => {
                let (r, c) = self.value(*a).dims().unwrap();
                let len = out.cols();
                let gv = acc(&mut grads[a.0], r * c);
                for i in 0..r {
                    let dst = &mut gv[i * c + start..i * c + start + len];
                    dst.iter_mut().zip(&g[i * len..(i + 1) * len]).for_each(|(x, y)| *x += y);
                }
            }
            Op::CausalSoftmax { a } => {
                let (r, c) = out.dims().unwrap();
                let offset = c - r;
                let y = out.data();
                let gv = acc(&mut grads[a.0], r * c);
                for i in 0..r {
                    let vis = i + offset + 1;
                    let yr = &y[i * c..i * c + vis];
                    let gr = &g[i * c..i * c + vis];
                    let d = dot(yr, gr);
                    for j in 0..vis {
                        gv[i * c + j] += yr[j] * (gr[j] - d);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (r, c) = out.dims().unwrap();
                let gn = self.value(*gain).data();
                if self.ng(*gain) {
                    let gg = acc(&mut grads[gain.0], c);
                    for i in 0..r {
                        for j in 0..c {
                            gg[j] += g[i * c + j] * xhat[i * c + j];
                        }
                    }
                }
                if self.ng(*bias) {
                    let gb = acc(&mut grads[bias.0], c);
                    for i in 0..r {
                        for j in 0..c {
                            gb[j] += g[i * c + j];
                        }
                    }
                }
                if self.ng(*x) {
                    let gx = acc(&mut grads[x.0], r * c);
                    let cf = c as f64;
                    for i in 0..r {
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        for j in 0..c {
                            let dh = g[i * c + j] * gn[j];
                            sum_dh += dh;
                            sum_dh_h += dh * xhat[i * c + j];
                        }
                        for j in 0..c {
                            let dh = g[i * c + j] * gn[j];
                            let h = xhat[i * c + j];
                            gx[i * c + j] += inv_std[i] * (dh - sum_dh / cf - h * sum_dh_h / cf);
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let t = self.value(*logits);
                let c = t.cols();
                let gl = acc(&mut grads[logits.0], t.len());
                for (k, &(row, target, w)) in targets.iter().enumerate() {
                    let s = g[0] * w;
                    let p = &probs[k * c..(k + 1) * c];
                    let dst = &mut gl[row * c..(row + 1) * c];
                    for j in 0..c {
                        dst[j] += s * p[j];
                    }
                    dst[target] -= s;
                }
            }
            Op::PickLogProb { logits, targets, probs } => {
                let t = self.value(*logits);
                let c = t.cols();
                let gl = acc(&mut grads[logits.0], t.len());
                for (i, &tg) in targets.iter().enumerate() {
                    let gi = g[i];
                    if gi == 0.0 {
                        continue;
                    }
                    let p = &probs[i * c..(i + 1) * c];
                    let dst = &mut gl[i * c..(i + 1) * c];
                    for j in 0..c {
                        dst[j] -= gi * p[j];
                    }
                    dst[tg] += gi;
                }
            }
            Op::WeightedSum { a, weights } => {
                let gv = acc(&mut grads[a.0], weights.len());
                gv.iter_mut().zip(weights).for_each(|(x, w)| *x += g[0] * w);
            }
        }
    }
}

/// Writes softmax(row) into `out`, returning log-sum-exp.
pub(crate) fn log_softmax_parts(row: &[f64], out: &mut [f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        let e = (x - max).exp();
        *o = e;
        z += e;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
    max + z.ln()
}

pub(crate) fn softmax_into(row: &[f64], out: &mut [f64]) {
    log_softmax_parts(row, out);
}

pub(crate) fn mean_var(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mu = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
    (mu, var)
}
