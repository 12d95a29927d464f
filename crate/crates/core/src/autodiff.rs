//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation in execution order; [`Graph::backward`]
//! replays the tape in exact reverse order. Parameters live in a
//! [`ParamStore`] that the graph borrows, so building a graph never copies
//! weights.

use std::rc::Rc;

use crate::error::{Result, XaqaError};
use crate::tensor::{Gemm, Tensor};

/// Floor added inside `log` by [`Graph::cross_entropy`].
pub const CE_EPS: f64 = 1e-12;
const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    pub fn total_len(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }
}

/// One (query block, key block) pair of a multi-head attention call.
///
/// Queries `q_start..q_start+q_len` attend over keys `k_start..k_start+k_len`.
/// With `causal`, query `i` only sees keys `0..=i` of its block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnBlock {
    pub q_start: usize,
    pub q_len: usize,
    pub k_start: usize,
    pub k_len: usize,
    pub causal: bool,
}

/// Placement of every block's probabilities inside the flat tensor produced
/// by [`Graph::attention_probs`]. Block `b`, head `h`, query row `i`, key `j`
/// lives at `offsets[b] + (h * q_len + i) * k_len + j`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnLayout {
    pub n_heads: usize,
    pub blocks: Vec<AttnBlock>,
    pub offsets: Vec<usize>,
    pub total: usize,
}

impl AttnLayout {
    pub fn new(n_heads: usize, blocks: Vec<AttnBlock>) -> Self {
        let mut offsets = Vec::with_capacity(blocks.len());
        let mut total = 0;
        for b in &blocks {
            offsets.push(total);
            total += n_heads * b.q_len * b.k_len;
        }
        AttnLayout {
            n_heads,
            blocks,
            offsets,
            total,
        }
    }

    /// Flat index of `(block, head, row, key)`.
    pub fn index(&self, block: usize, head: usize, row: usize, key: usize) -> usize {
        let b = &self.blocks[block];
        self.offsets[block] + (head * b.q_len + row) * b.k_len + key
    }

    /// Flat indices of `row` of `block`, head-major: `n_heads × k_len`.
    pub fn row_indices(&self, block: usize, row: usize) -> Vec<usize> {
        let k_len = self.blocks[block].k_len;
        let mut idx = Vec::with_capacity(self.n_heads * k_len);
        for h in 0..self.n_heads {
            let start = self.index(block, h, row, 0);
            idx.extend(start..start + k_len);
        }
        idx
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    SoftmaxRows(Var),
    Log(Var),
    Gelu(Var),
    Relu(Var),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        rstd: Vec<f64>,
    },
    CrossEntropy {
        probs: Var,
        target: Tensor,
    },
    Select {
        x: Var,
        idx: Vec<usize>,
    },
    MeanRows(Var),
    ConcatRows(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    AttnProbs {
        q: Var,
        k: Var,
        layout: Rc<AttnLayout>,
        scale: f64,
    },
    AttnMix {
        p: Var,
        v: Var,
        layout: Rc<AttnLayout>,
    },
}

enum Value {
    Owned(Tensor),
    Param(ParamId),
}

struct Node {
    value: Value,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Dynamic computation graph. Re-recorded for every forward pass.
pub struct Graph<'p> {
    params: Option<&'p ParamStore>,
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Gradient for each parameter leaf that received one.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.params
            .iter()
            .filter_map(|&(pid, node)| self.grads[node].as_deref().map(|g| (pid, g)))
    }
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Graph::new()
    }
}

impl<'p> Graph<'p> {
    pub fn new() -> Self {
        Graph {
            params: None,
            nodes: Vec::new(),
        }
    }

    pub fn with_params(params: &'p ParamStore) -> Self {
        Graph {
            params: Some(params),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self.params.expect("param graph").get(*id),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives a gradient.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(t),
            op: Op::Leaf,
            requires_grad: true,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(t),
            op: Op::Leaf,
            requires_grad: false,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf bound to a parameter of the borrowed store.
    pub fn param(&mut self, id: ParamId) -> Var {
        assert!(self.params.is_some(), "graph has no parameter store");
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Leaf,
            requires_grad: true,
            param: Some(id),
        });
        Var(self.nodes.len() - 1)
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(XaqaError::Dimension {
                op,
                lhs: s.to_vec(),
                rhs: vec![],
            });
        }
        Ok((s[0], s[1]))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(XaqaError::Dimension {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(XaqaError::Dimension {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let mut out = vec![0.0; m * n];
        Gemm { m, k, n, trans_a: false, trans_b: false, accumulate: false }.run(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
        );
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(t, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ` for `a: m×k`, `b: n×k`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul_t")?;
        let (n, k2) = self.dims2(b, "matmul_t")?;
        if k != k2 {
            return Err(XaqaError::Dimension {
                op: "matmul_t",
                lhs: vec![m, k],
                rhs: vec![n, k2],
            });
        }
        let mut out = vec![0.0; m * n];
        Gemm { m, k, n, trans_a: false, trans_b: true, accumulate: false }.run(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
        );
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(t, Op::MatMulT(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    /// Adds the vector `bias` (length n) to every row of `a` (m×n).
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let n = self.value(a).cols();
        if self.shape(bias) != [n] {
            return Err(XaqaError::Dimension {
                op: "add_row",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let b = self.value(bias).data();
        let data = self
            .value(a)
            .data()
            .chunks(n)
            .flat_map(|row| row.iter().zip(b).map(|(x, y)| x + y))
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(t, Op::AddRow(a, bias), &[a, bias]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let data = self.value(a).data().iter().map(|x| x * c).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data).expect("same shape");
        self.push(t, Op::Scale(a, c), &[a])
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    /// Row-wise softmax with per-row max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if !x.is_finite() {
            return Err(XaqaError::Numeric("softmax input is not finite".into()));
        }
        let n = x.cols();
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(n) {
            softmax_in_place(row);
        }
        let t = Tensor::new(x.shape().to_vec(), out)?;
        Ok(self.push(t, Op::SoftmaxRows(a), &[a]))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let data = self.value(a).data().iter().map(|x| x.ln()).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data).expect("same shape");
        self.push(t, Op::Log(a), &[a])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let data = self.value(a).data().iter().map(|&x| gelu(x)).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data).expect("same shape");
        self.push(t, Op::Gelu(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let data = self.value(a).data().iter().map(|&x| x.max(0.0)).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data).expect("same shape");
        self.push(t, Op::Relu(a), &[a])
    }

    /// Rows `ids` of an embedding table, stacked.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.dims2(table, "gather")?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(XaqaError::contract(format!(
                "gather index {bad} out of range for table of {v} rows"
            )));
        }
        let tab = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tab[i * d..(i + 1) * d]);
        }
        let t = Tensor::new(vec![ids.len(), d], out)?;
        Ok(self.push(
            t,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Row-wise layer normalization with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let n = self.value(x).cols();
        if self.shape(gamma) != [n] || self.shape(beta) != [n] {
            return Err(XaqaError::Dimension {
                op: "layer_norm",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(gamma).to_vec(),
            });
        }
        let xv = self.value(x);
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let rows = xv.rows();
        let mut out = Vec::with_capacity(xv.len());
        let mut means = Vec::with_capacity(rows);
        let mut rstds = Vec::with_capacity(rows);
        for row in xv.data().chunks(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rstd = 1.0 / (var + LN_EPS).sqrt();
            for j in 0..n {
                out.push((row[j] - mean) * rstd * g[j] + b[j]);
            }
            means.push(mean);
            rstds.push(rstd);
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean: means,
                rstd: rstds,
            },
            &[x, gamma, beta],
        ))
    }

    /// `−Σ target·ln(probs + ε)` over all elements, as a scalar.
    pub fn cross_entropy(&mut self, probs: Var, target: Tensor) -> Result<Var> {
        if self.value(probs).len() != target.len() {
            return Err(XaqaError::Dimension {
                op: "cross_entropy",
                lhs: self.shape(probs).to_vec(),
                rhs: target.shape().to_vec(),
            });
        }
        let loss: f64 = -self
            .value(probs)
            .data()
            .iter()
            .zip(target.data())
            .map(|(p, t)| if *t == 0.0 { 0.0 } else { t * (p + CE_EPS).ln() })
            .sum::<f64>();
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { probs, target }, &[probs]))
    }

    /// Elements of `x` at flat positions `idx`, reshaped to `shape`.
    pub fn select(&mut self, x: Var, idx: Vec<usize>, shape: Vec<usize>) -> Result<Var> {
        let src = self.value(x).data();
        if let Some(&bad) = idx.iter().find(|&&i| i >= src.len()) {
            return Err(XaqaError::contract(format!(
                "select index {bad} out of range for {} elements",
                src.len()
            )));
        }
        let data = idx.iter().map(|&i| src[i]).collect();
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t, Op::Select { x, idx }, &[x]))
    }

    /// Column-wise mean of an m×n matrix, as a length-n vector.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2(a, "mean_rows")?;
        let out = mean_of_rows(self.value(a).data(), m, n);
        Ok(self.push(Tensor::vector(out), Op::MeanRows(a), &[a]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| XaqaError::contract("concat_rows of no tensors"))?;
        let (_, n) = self.dims2(first, "concat_rows")?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (m, c) = self.dims2(p, "concat_rows")?;
            if c != n {
                return Err(XaqaError::Dimension {
                    op: "concat_rows",
                    lhs: vec![rows, n],
                    rhs: vec![m, c],
                });
            }
            rows += m;
            data.extend_from_slice(self.value(p).data());
        }
        let t = Tensor::new(vec![rows, n], data)?;
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims2(x, "slice_rows")?;
        if start + len > m {
            return Err(XaqaError::Dimension {
                op: "slice_rows",
                lhs: vec![m, n],
                rhs: vec![start, len],
            });
        }
        let data = self.value(x).data()[start * n..(start + len) * n].to_vec();
        let t = Tensor::new(vec![len, n], data)?;
        Ok(self.push(t, Op::SliceRows { x, start }, &[x]))
    }

    /// Multi-head scaled dot-product attention probabilities.
    ///
    /// `q` and `k` are `rows × d_model`; head `h` uses columns
    /// `h*d_head..(h+1)*d_head`. Output is flat, laid out per [`AttnLayout`].
    pub fn attention_probs(&mut self, q: Var, k: Var, layout: Rc<AttnLayout>) -> Result<Var> {
        let (qr, d) = self.dims2(q, "attention_probs")?;
        let (kr, d2) = self.dims2(k, "attention_probs")?;
        let h = layout.n_heads;
        if d != d2 || h == 0 || d % h != 0 {
            return Err(XaqaError::Dimension {
                op: "attention_probs",
                lhs: vec![qr, d],
                rhs: vec![kr, d2],
            });
        }
        for b in &layout.blocks {
            if b.q_start + b.q_len > qr
                || b.k_start + b.k_len > kr
                || b.k_len == 0
                || (b.causal && b.q_len > b.k_len)
            {
                return Err(XaqaError::contract(format!(
                    "attention block {b:?} does not fit q rows {qr}, k rows {kr}"
                )));
            }
        }
        let dh = d / h;
        let scale = 1.0 / (dh as f64).sqrt();
        let qv = self.value(q).data();
        let kv = self.value(k).data();
        let mut out = vec![0.0; layout.total];
        for (bi, b) in layout.blocks.iter().enumerate() {
            for head in 0..h {
                let c0 = head * dh;
                for i in 0..b.q_len {
                    let qrow = &qv[(b.q_start + i) * d + c0..(b.q_start + i) * d + c0 + dh];
                    let base = layout.index(bi, head, i, 0);
                    let visible = if b.causal { i + 1 } else { b.k_len };
                    let row = &mut out[base..base + visible];
                    for (j, slot) in row.iter_mut().enumerate() {
                        let krow = &kv[(b.k_start + j) * d + c0..(b.k_start + j) * d + c0 + dh];
                        *slot = scale * dot(qrow, krow);
                    }
                    softmax_in_place(row);
                }
            }
        }
        let t = Tensor::vector(out);
        Ok(self.push(t, Op::AttnProbs { q, k, layout, scale }, &[q, k]))
    }

    /// Mixes value rows with attention probabilities from
    /// [`Graph::attention_probs`]. Output has `q_rows` rows; rows not covered
    /// by any block are zero.
    pub fn attention_mix(&mut self, p: Var, v: Var, layout: Rc<AttnLayout>, q_rows: usize) -> Result<Var> {
        let (vr, d) = self.dims2(v, "attention_mix")?;
        let h = layout.n_heads;
        if self.value(p).len() != layout.total || d % h != 0 {
            return Err(XaqaError::Dimension {
                op: "attention_mix",
                lhs: vec![self.value(p).len()],
                rhs: vec![layout.total],
            });
        }
        if layout.blocks.iter().any(|b| b.k_start + b.k_len > vr || b.q_start + b.q_len > q_rows) {
            return Err(XaqaError::contract("attention_mix block exceeds value rows"));
        }
        let dh = d / h;
        let pv = self.value(p).data();
        let vv = self.value(v).data();
        let mut out = vec![0.0; q_rows * d];
        for (bi, b) in layout.blocks.iter().enumerate() {
            for head in 0..h {
                let c0 = head * dh;
                for i in 0..b.q_len {
                    let base = layout.index(bi, head, i, 0);
                    let orow = (b.q_start + i) * d + c0;
                    for j in 0..b.k_len {
                        let w = pv[base + j];
                        if w == 0.0 {
                            continue;
                        }
                        let vrow = (b.k_start + j) * d + c0;
                        for c in 0..dh {
                            out[orow + c] += w * vv[vrow + c];
                        }
                    }
                }
            }
        }
        let t = Tensor::new(vec![q_rows, d], out)?;
        Ok(self.push(t, Op::AttnMix { p, v, layout }, &[p, v]))
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(XaqaError::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if self.nodes[idx].requires_grad {
                self.backprop_node(idx, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.param.map(|p| (p, i)))
            .collect();
        Ok(Gradients { grads, params })
    }

    fn backprop_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = self.value(Var(idx));
        // Accumulates into the gradient buffer of `v`, creating it on demand.
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let len = self.value(v).len();
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
            f(buf);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.value(*a).rows(), self.value(*a).cols());
                let n = self.value(*b).cols();
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                acc(*a, &mut |da| {
                    Gemm { m, k: n, n: k, trans_a: false, trans_b: true, accumulate: true }.run(g, bv, da)
                });
                acc(*b, &mut |db| {
                    Gemm { m: k, k: m, n, trans_a: true, trans_b: false, accumulate: true }.run(av, g, db)
                });
            }
            Op::MatMulT(a, b) => {
                let (m, k) = (self.value(*a).rows(), self.value(*a).cols());
                let n = self.value(*b).rows();
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                acc(*a, &mut |da| {
                    Gemm { m, k: n, n: k, trans_a: false, trans_b: false, accumulate: true }.run(g, bv, da)
                });
                acc(*b, &mut |db| {
                    Gemm { m: n, k: m, n: k, trans_a: true, trans_b: false, accumulate: true }.run(g, av, db)
                });
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    acc(v, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                }
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                acc(*a, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * bv[i];
                    }
                });
                acc(*b, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * av[i];
                    }
                });
            }
            Op::AddRow(a, bias) => {
                acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                let n = self.value(*bias).len();
                acc(*bias, &mut |d| {
                    for row in g.chunks(n) {
                        d.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                    }
                });
            }
            Op::Scale(a, c) => {
                acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += c * y));
            }
            Op::Sum(a) => {
                acc(*a, &mut |d| d.iter_mut().for_each(|x| *x += g[0]));
            }
            Op::SoftmaxRows(a) => {
                let n = out.cols();
                let y = out.data();
                acc(*a, &mut |d| {
                    for ((dr, yr), gr) in d.chunks_mut(n).zip(y.chunks(n)).zip(g.chunks(n)) {
                        let s: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for j in 0..n {
                            dr[j] += yr[j] * (gr[j] - s);
                        }
                    }
                });
            }
            Op::Log(a) => {
                let x = self.value(*a).data();
                acc(*a, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] / x[i];
                    }
                });
            }
            Op::Gelu(a) => {
                let x = self.value(*a).data();
                acc(*a, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * gelu_grad(x[i]);
                    }
                });
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                acc(*a, &mut |d| {
                    for i in 0..d.len() {
                        if x[i] > 0.0 {
                            d[i] += g[i];
                        }
                    }
                });
            }
            Op::Gather { table, ids } => {
                let dim = self.value(*table).cols();
                acc(*table, &mut |d| {
                    for (r, &id) in ids.iter().enumerate() {
                        let src = &g[r * dim..(r + 1) * dim];
                        d[id * dim..(id + 1) * dim]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(x, y)| *x += y);
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            } => {
                let n = out.cols();
                let xv = self.value(*x).data();
                let gv = self.value(*gamma).data();
                let xhat = |r: usize, j: usize| (xv[r * n + j] - mean[r]) * rstd[r];
                acc(*gamma, &mut |d| {
                    for r in 0..mean.len() {
                        for j in 0..n {
                            d[j] += g[r * n + j] * xhat(r, j);
                        }
                    }
                });
                acc(*beta, &mut |d| {
                    for row in g.chunks(n) {
                        d.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                });
                acc(*x, &mut |d| {
                    let mut dxhat = vec![0.0; n];
                    for r in 0..mean.len() {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..n {
                            dxhat[j] = g[r * n + j] * gv[j];
                            m1 += dxhat[j];
                            m2 += dxhat[j] * xhat(r, j);
                        }
                        m1 /= n as f64;
                        m2 /= n as f64;
                        for j in 0..n {
                            d[r * n + j] += rstd[r] * (dxhat[j] - m1 - xhat(r, j) * m2);
                        }
                    }
                });
            }
            Op::CrossEntropy { probs, target } => {
                let p = self.value(*probs).data();
                let t = target.data();
                acc(*probs, &mut |d| {
                    for i in 0..d.len() {
                        if t[i] != 0.0 {
                            d[i] -= g[0] * t[i] / (p[i] + CE_EPS);
                        }
                    }
                });
            }
            Op::Select { x, idx } => {
                acc(*x, &mut |d| {
                    for (o, &i) in idx.iter().enumerate() {
                        d[i] += g[o];
                    }
                });
            }
            Op::MeanRows(a) => {
                let m = self.value(*a).rows();
                let n = out.len();
                acc(*a, &mut |d| {
                    for row in d.chunks_mut(n) {
                        for j in 0..n {
                            row[j] += g[j] / m as f64;
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    let slice = &g[offset..offset + len];
                    acc(p, &mut |d| d.iter_mut().zip(slice).for_each(|(a, b)| *a += b));
                    offset += len;
                }
            }
            Op::SliceRows { x, start } => {
                let n = out.cols();
                let off = start * n;
                acc(*x, &mut |d| {
                    d[off..off + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(a, b)| *a += b)
                });
            }
            Op::AttnProbs { q, k, layout, scale } => {
                self.attn_probs_backward(*q, *k, layout, *scale, out.data(), g, grads);
            }
            Op::AttnMix { p, v, layout } => {
                let d = self.value(*v).cols();
                let dh = d / layout.n_heads;
                let pv = self.value(*p).data();
                let vv = self.value(*v).data();
                acc(*p, &mut |dp| {
                    for (bi, b) in layout.blocks.iter().enumerate() {
                        for head in 0..layout.n_heads {
                            let c0 = head * dh;
                            for i in 0..b.q_len {
                                let base = layout.index(bi, head, i, 0);
                                let grow = &g[(b.q_start + i) * d + c0..(b.q_start + i) * d + c0 + dh];
                                for j in 0..b.k_len {
                                    let vrow = &vv[(b.k_start + j) * d + c0..(b.k_start + j) * d + c0 + dh];
                                    dp[base + j] += dot(grow, vrow);
                                }
                            }
                        }
                    }
                });
                acc(*v, &mut |dv| {
                    for (bi, b) in layout.blocks.iter().enumerate() {
                        for head in 0..layout.n_heads {
                            let c0 = head * dh;
                            for i in 0..b.q_len {
                                let base = layout.index(bi, head, i, 0);
                                let gi = (b.q_start + i) * d + c0;
                                for j in 0..b.k_len {
                                    let w = pv[base + j];
                                    if w == 0.0 {
                                        continue;
                                    }
                                    let vj = (b.k_start + j) * d + c0;
                                    for c in 0..dh {
                                        dv[vj + c] += w * g[gi + c];
                                    }
                                }
                            }
                        }
                    }
                });
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attn_probs_backward(
        &self,
        q: Var,
        k: Var,
        layout: &AttnLayout,
        scale: f64,
        probs: &[f64],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let d = self.value(q).cols();
        let dh = d / layout.n_heads;
        // dS = P ⊙ (dP − Σ dP·P), computed once and shared by dQ and dK.
        let mut ds = vec![0.0; layout.total];
        for (bi, b) in layout.blocks.iter().enumerate() {
            for head in 0..layout.n_heads {
                for i in 0..b.q_len {
                    let base = layout.index(bi, head, i, 0);
                    let p = &probs[base..base + b.k_len];
                    let gp = &g[base..base + b.k_len];
                    let s = dot(p, gp);
                    for j in 0..b.k_len {
                        ds[base + j] = p[j] * (gp[j] - s);
                    }
                }
            }
        }
        let qv = self.value(q).data();
        let kv = self.value(k).data();
        let q_rg = self.nodes[q.0].requires_grad;
        let k_rg = self.nodes[k.0].requires_grad;
        if q_rg {
            let buf = grads[q.0].get_or_insert_with(|| vec![0.0; qv.len()]);
            for (bi, b) in layout.blocks.iter().enumerate() {
                for head in 0..layout.n_heads {
                    let c0 = head * dh;
                    for i in 0..b.q_len {
                        let base = layout.index(bi, head, i, 0);
                        let qi = (b.q_start + i) * d + c0;
                        for j in 0..b.k_len {
                            let w = ds[base + j] * scale;
                            if w == 0.0 {
                                continue;
                            }
                            let kj = (b.k_start + j) * d + c0;
                            for c in 0..dh {
                                buf[qi + c] += w * kv[kj + c];
                            }
                        }
                    }
                }
            }
        }
        if k_rg {
            let buf = grads[k.0].get_or_insert_with(|| vec![0.0; kv.len()]);
            for (bi, b) in layout.blocks.iter().enumerate() {
                for head in 0..layout.n_heads {
                    let c0 = head * dh;
                    for i in 0..b.q_len {
                        let base = layout.index(bi, head, i, 0);
                        let qi = (b.q_start + i) * d + c0;
                        for j in 0..b.k_len {
                            let w = ds[base + j] * scale;
                            if w == 0.0 {
                                continue;
                            }
                            let kj = (b.k_start + j) * d + c0;
                            for c in 0..dh {
                                buf[kj + c] += w * qv[qi + c];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
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

/// Column means of an m×n row-major buffer. Rows are summed in order, then
/// divided by m; every head-average in the crate goes through here.
pub fn mean_of_rows(data: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n];
    for row in data.chunks(n).take(m) {
        out.iter_mut().zip(row).for_each(|(a, b)| *a += b);
    }
    out.iter_mut().for_each(|v| *v /= m as f64);
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}
