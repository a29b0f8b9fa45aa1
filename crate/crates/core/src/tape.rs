//! Minimal reverse-mode gradient tape.
//!
//! Records a forward pass as a flat list of nodes over 2-D tensors, then
//! walks it backwards to accumulate exact gradients for registered
//! parameters. The op set is closed: matmul, add/sub, elementwise and
//! column-broadcast multiply, row softmax with temperature, rms-norm, silu,
//! embedding lookup, per-row column gather (the straight-through top-k
//! hook: indices enter as constants, gradients flow through the gathered
//! values only), row sum, column slice/concat, transpose, constant add,
//! mean cross-entropy, and weighted scalar sums.
//!
//! Every node's value is a (rows, cols) tensor; scalars are (1, 1).
//! Gradients are only propagated into subgraphs that can reach a
//! registered parameter, so frozen weights enter as constants and are
//! provably untouched by training.

use crate::error::{Error, Result};
use crate::tensor::{softmax_slice, Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

/// Identifier the caller assigns to each trainable tensor.
pub type ParamId = usize;

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// col (p,1) broadcast-multiplied into mat (p,q).
    MulCol {
        col: NodeId,
        mat: NodeId,
    },
    Scale(NodeId, f64),
    SoftmaxRows {
        input: NodeId,
        temperature: f64,
    },
    Silu(NodeId),
    RmsNorm {
        input: NodeId,
        gamma: NodeId,
        eps: f64,
    },
    Embedding {
        table: NodeId,
        ids: Vec<usize>,
    },
    GatherCols {
        input: NodeId,
        idx: Vec<Vec<usize>>,
    },
    RowSum(NodeId),
    SliceCols {
        input: NodeId,
        start: usize,
        len: usize,
    },
    SliceRows {
        input: NodeId,
        start: usize,
        len: usize,
    },
    ConcatCols(Vec<NodeId>),
    Transpose(NodeId),
    AddConst(NodeId),
    CrossEntropyMean {
        logits: NodeId,
        targets: Vec<usize>,
    },
    /// Weighted sum of scalar nodes: sum_i coeff_i * node_i.
    ScalarCombine(Vec<(f64, NodeId)>),
}

struct Node<T: Element> {
    value: Tensor<T>,
    op: Op,
    /// True iff a registered parameter is reachable below this node.
    needs_grad: bool,
    param: Option<ParamId>,
}

pub struct Tape<T: Element> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn scalar_value(&self, id: NodeId) -> T {
        let t = &self.nodes[id.0].value;
        debug_assert_eq!(t.numel(), 1, "scalar_value on non-scalar node");
        t.data()[0]
    }

    fn push(&mut self, value: Tensor<T>, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            param: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Frozen input: gradients never flow past it.
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Trainable input; its gradient is available after `backward`.
    pub fn param(&mut self, value: Tensor<T>, id: ParamId) -> NodeId {
        let node = self.push(value, Op::Leaf, true);
        self.nodes[node.0].param = Some(id);
        node
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.nodes[a.0].value.matmul(&self.nodes[b.0].value)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Matmul(a, b), needs))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.nodes[a.0].value.add(&self.nodes[b.0].value)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add(a, b), needs))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.nodes[a.0].value.sub(&self.nodes[b.0].value)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Sub(a, b), needs))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape() != vb.shape() {
            return Err(Error::Dimension {
                op: "tape_mul",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::new(va.shape(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Mul(a, b), needs))
    }

    /// col (p,1) * mat (p,q) row-broadcast.
    pub fn mul_col(&mut self, col: NodeId, mat: NodeId) -> Result<NodeId> {
        let (p, one) = self.nodes[col.0].value.dims2()?;
        let (pm, q) = self.nodes[mat.0].value.dims2()?;
        if one != 1 || p != pm {
            return Err(Error::Dimension {
                op: "tape_mul_col",
                lhs: self.nodes[col.0].value.shape().to_vec(),
                rhs: self.nodes[mat.0].value.shape().to_vec(),
            });
        }
        let c = self.nodes[col.0].value.data();
        let m = self.nodes[mat.0].value.data();
        let mut data = vec![T::zero(); p * q];
        for i in 0..p {
            for j in 0..q {
                data[i * q + j] = c[i] * m[i * q + j];
            }
        }
        let value = Tensor::new(&[p, q], data)?;
        let needs = self.needs(col) || self.needs(mat);
        Ok(self.push(value, Op::MulCol { col, mat }, needs))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let value = self.nodes[a.0].value.scale(T::from_f64(factor));
        let needs = self.needs(a);
        self.push(value, Op::Scale(a, factor), needs)
    }

    pub fn softmax_rows(&mut self, input: NodeId, temperature: f64) -> Result<NodeId> {
        let (p, q) = self.nodes[input.0].value.dims2()?;
        let mut data = vec![T::zero(); p * q];
        for i in 0..p {
            let row = &self.nodes[input.0].value.data()[i * q..(i + 1) * q];
            softmax_slice(&mut data[i * q..(i + 1) * q], row, temperature)?;
        }
        let value = Tensor::new(&[p, q], data)?;
        let needs = self.needs(input);
        Ok(self.push(value, Op::SoftmaxRows { input, temperature }, needs))
    }

    pub fn silu(&mut self, input: NodeId) -> NodeId {
        let value = self.nodes[input.0]
            .value
            .map(|x| x / (T::one() + (-x).exp()));
        let needs = self.needs(input);
        self.push(value, Op::Silu(input), needs)
    }

    /// Per-row rms-norm with learned gain: y = x * gamma / rms(x).
    pub fn rmsnorm(&mut self, input: NodeId, gamma: NodeId, eps: f64) -> Result<NodeId> {
        let (p, q) = self.nodes[input.0].value.dims2()?;
        let (gr, gq) = self.nodes[gamma.0].value.dims2()?;
        if gr != 1 || gq != q {
            return Err(Error::Dimension {
                op: "tape_rmsnorm",
                lhs: self.nodes[input.0].value.shape().to_vec(),
                rhs: self.nodes[gamma.0].value.shape().to_vec(),
            });
        }
        let x = self.nodes[input.0].value.data();
        let g = self.nodes[gamma.0].value.data();
        let mut data = vec![T::zero(); p * q];
        for i in 0..p {
            let row = &x[i * q..(i + 1) * q];
            let ms = row.iter().fold(T::zero(), |acc, &v| acc + v * v).as_f64() / q as f64;
            let inv_rms = T::from_f64(1.0 / (ms + eps).sqrt());
            for j in 0..q {
                data[i * q + j] = row[j] * g[j] * inv_rms;
            }
        }
        let value = Tensor::new(&[p, q], data)?;
        let needs = self.needs(input) || self.needs(gamma);
        Ok(self.push(value, Op::RmsNorm { input, gamma, eps }, needs))
    }

    /// Row lookup: table (v, d), ids (len) -> (len, d).
    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let (v, d) = self.nodes[table.0].value.dims2()?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Parameter(format!(
                "embedding id {bad} out of vocab {v}"
            )));
        }
        let tdata = self.nodes[table.0].value.data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            data.extend_from_slice(&tdata[id * d..(id + 1) * d]);
        }
        let value = Tensor::new(&[ids.len(), d], data)?;
        let needs = self.needs(table);
        Ok(self.push(
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            needs,
        ))
    }

    /// Per-row column gather: input (p, n), idx[i] lists k columns of row i.
    /// The indices are constants; this is the straight-through selection.
    pub fn gather_cols(&mut self, input: NodeId, idx: &[Vec<usize>]) -> Result<NodeId> {
        let (p, n) = self.nodes[input.0].value.dims2()?;
        if idx.len() != p {
            return Err(Error::Parameter(format!(
                "gather_cols needs one index list per row: {} lists for {p} rows",
                idx.len()
            )));
        }
        let k = idx.first().map_or(0, |v| v.len());
        if k == 0 || idx.iter().any(|v| v.len() != k) {
            return Err(Error::Parameter(
                "gather_cols index lists must be non-empty and equal-length".into(),
            ));
        }
        if let Some(bad) = idx.iter().flatten().find(|&&j| j >= n) {
            return Err(Error::Parameter(format!(
                "gather_cols index {bad} out of {n} columns"
            )));
        }
        let src = self.nodes[input.0].value.data();
        let mut data = Vec::with_capacity(p * k);
        for (i, row_idx) in idx.iter().enumerate() {
            for &j in row_idx {
                data.push(src[i * n + j]);
            }
        }
        let value = Tensor::new(&[p, k], data)?;
        let needs = self.needs(input);
        Ok(self.push(
            value,
            Op::GatherCols {
                input,
                idx: idx.to_vec(),
            },
            needs,
        ))
    }

    /// (p, q) -> (p, 1) sum over columns.
    pub fn row_sum(&mut self, input: NodeId) -> Result<NodeId> {
        let (p, q) = self.nodes[input.0].value.dims2()?;
        let src = self.nodes[input.0].value.data();
        let data = (0..p)
            .map(|i| {
                src[i * q..(i + 1) * q]
                    .iter()
                    .fold(T::zero(), |acc, &v| acc + v)
            })
            .collect();
        let value = Tensor::new(&[p, 1], data)?;
        let needs = self.needs(input);
        Ok(self.push(value, Op::RowSum(input), needs))
    }

    pub fn slice_rows(&mut self, input: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (p, q) = self.nodes[input.0].value.dims2()?;
        if start + len > p {
            return Err(Error::Parameter(format!(
                "slice_rows [{start}, {start}+{len}) out of {p} rows"
            )));
        }
        let src = self.nodes[input.0].value.data();
        let value = Tensor::new(&[len, q], src[start * q..(start + len) * q].to_vec())?;
        let needs = self.needs(input);
        Ok(self.push(value, Op::SliceRows { input, start, len }, needs))
    }

    pub fn slice_cols(&mut self, input: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (p, q) = self.nodes[input.0].value.dims2()?;
        if start + len > q {
            return Err(Error::Parameter(format!(
                "slice_cols [{start}, {start}+{len}) out of {q} columns"
            )));
        }
        let src = self.nodes[input.0].value.data();
        let mut data = Vec::with_capacity(p * len);
        for i in 0..p {
            data.extend_from_slice(&src[i * q + start..i * q + start + len]);
        }
        let value = Tensor::new(&[p, len], data)?;
        let needs = self.needs(input);
        Ok(self.push(value, Op::SliceCols { input, start, len }, needs))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Parameter("concat_cols needs at least one part".into()));
        }
        let p = self.nodes[parts[0].0].value.dims2()?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &part in parts {
            let (pp, q) = self.nodes[part.0].value.dims2()?;
            if pp != p {
                return Err(Error::Dimension {
                    op: "tape_concat_cols",
                    lhs: self.nodes[parts[0].0].value.shape().to_vec(),
                    rhs: self.nodes[part.0].value.shape().to_vec(),
                });
            }
            widths.push(q);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(p * total);
        for i in 0..p {
            for (&part, &q) in parts.iter().zip(&widths) {
                let src = self.nodes[part.0].value.data();
                data.extend_from_slice(&src[i * q..(i + 1) * q]);
            }
        }
        let value = Tensor::new(&[p, total], data)?;
        let needs = parts.iter().any(|&part| self.needs(part));
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), needs))
    }

    pub fn transpose(&mut self, input: NodeId) -> Result<NodeId> {
        let value = self.nodes[input.0].value.transposed()?;
        let needs = self.needs(input);
        Ok(self.push(value, Op::Transpose(input), needs))
    }

    /// input + constant, elementwise (e.g. the causal attention mask).
    pub fn add_const(&mut self, input: NodeId, constant: Tensor<T>) -> Result<NodeId> {
        let value = self.nodes[input.0].value.add(&constant)?;
        let needs = self.needs(input);
        Ok(self.push(value, Op::AddConst(input), needs))
    }

    /// Mean over rows of -log softmax(logits)[target].
    pub fn cross_entropy_mean(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let (p, n) = self.nodes[logits.0].value.dims2()?;
        if targets.len() != p {
            return Err(Error::Parameter(format!(
                "cross_entropy needs one target per row: {} targets for {p} rows",
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= n) {
            return Err(Error::Parameter(format!(
                "cross_entropy label {bad} out of range {n}"
            )));
        }
        let src = self.nodes[logits.0].value.data();
        let mut probs = vec![T::zero(); n];
        let mut total = 0.0;
        for (i, &target) in targets.iter().enumerate() {
            softmax_slice(&mut probs, &src[i * n..(i + 1) * n], 1.0)?;
            total -= probs[target].as_f64().max(1e-300).ln();
        }
        let value = Tensor::new(&[1, 1], vec![T::from_f64(total / p as f64)])?;
        let needs = self.needs(logits);
        Ok(self.push(
            value,
            Op::CrossEntropyMean {
                logits,
                targets: targets.to_vec(),
            },
            needs,
        ))
    }

    /// sum_i coeff_i * scalar_i.
    pub fn scalar_combine(&mut self, terms: &[(f64, NodeId)]) -> Result<NodeId> {
        let mut total = 0.0;
        for &(coeff, id) in terms {
            let v = &self.nodes[id.0].value;
            if v.numel() != 1 {
                return Err(Error::Parameter(format!(
                    "scalar_combine on non-scalar node of shape {:?}",
                    v.shape()
                )));
            }
            total += coeff * v.data()[0].as_f64();
        }
        let value = Tensor::new(&[1, 1], vec![T::from_f64(total)])?;
        let needs = terms.iter().any(|&(_, id)| self.needs(id));
        Ok(self.push(value, Op::ScalarCombine(terms.to_vec()), needs))
    }

    /// Reverse pass from a scalar loss. Returns gradients for every
    /// registered parameter that the loss actually reaches.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Internal(format!(
                "backward root must be scalar, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(&[1, 1], T::one()));

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let Some(grad) = grads[id].take() else {
                continue;
            };
            self.propagate(id, &grad, &mut grads)?;
            grads[id] = Some(grad);
        }

        let mut by_param: std::collections::BTreeMap<ParamId, Tensor<T>> =
            std::collections::BTreeMap::new();
        for (id, node) in self.nodes.iter().enumerate() {
            if let (Some(pid), Some(grad)) = (node.param, grads[id].take()) {
                // A parameter used at several tape positions accumulates.
                match by_param.remove(&pid) {
                    None => {
                        by_param.insert(pid, grad);
                    }
                    Some(prev) => {
                        by_param.insert(pid, prev.add(&grad)?);
                    }
                }
            }
        }
        Ok(Gradients { by_param })
    }

    fn accumulate(
        grads: &mut [Option<Tensor<T>>],
        id: NodeId,
        delta: Tensor<T>,
    ) -> Result<()> {
        match &mut grads[id.0] {
            Some(existing) => {
                *existing = existing.add(&delta)?;
            }
            slot @ None => *slot = Some(delta),
        }
        Ok(())
    }

    fn propagate(
        &self,
        id: usize,
        grad: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                // dA = dC x B^T, dB = A^T x dC
                if self.needs(*a) {
                    let bt = self.nodes[b.0].value.transposed()?;
                    Self::accumulate(grads, *a, grad.matmul(&bt)?)?;
                }
                if self.needs(*b) {
                    let at = self.nodes[a.0].value.transposed()?;
                    Self::accumulate(grads, *b, at.matmul(grad)?)?;
                }
            }
            Op::Add(a, b) => {
                if self.needs(*a) {
                    Self::accumulate(grads, *a, grad.clone())?;
                }
                if self.needs(*b) {
                    Self::accumulate(grads, *b, grad.clone())?;
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    Self::accumulate(grads, *a, grad.clone())?;
                }
                if self.needs(*b) {
                    Self::accumulate(grads, *b, grad.scale(-T::one()))?;
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let vb = &self.nodes[b.0].value;
                    let delta = Tensor::new(
                        grad.shape(),
                        grad.data()
                            .iter()
                            .zip(vb.data())
                            .map(|(&g, &v)| g * v)
                            .collect(),
                    )?;
                    Self::accumulate(grads, *a, delta)?;
                }
                if self.needs(*b) {
                    let va = &self.nodes[a.0].value;
                    let delta = Tensor::new(
                        grad.shape(),
                        grad.data()
                            .iter()
                            .zip(va.data())
                            .map(|(&g, &v)| g * v)
                            .collect(),
                    )?;
                    Self::accumulate(grads, *b, delta)?;
                }
            }
            Op::MulCol { col, mat } => {
                let (p, q) = self.nodes[mat.0].value.dims2()?;
                if self.needs(*col) {
                    let m = self.nodes[mat.0].value.data();
                    let mut delta = vec![T::zero(); p];
                    for i in 0..p {
                        for j in 0..q {
                            delta[i] = delta[i] + grad.data()[i * q + j] * m[i * q + j];
                        }
                    }
                    Self::accumulate(grads, *col, Tensor::new(&[p, 1], delta)?)?;
                }
                if self.needs(*mat) {
                    let c = self.nodes[col.0].value.data();
                    let mut delta = vec![T::zero(); p * q];
                    for i in 0..p {
                        for j in 0..q {
                            delta[i * q + j] = grad.data()[i * q + j] * c[i];
                        }
                    }
                    Self::accumulate(grads, *mat, Tensor::new(&[p, q], delta)?)?;
                }
            }
            Op::Scale(a, factor) => {
                if self.needs(*a) {
                    Self::accumulate(grads, *a, grad.scale(T::from_f64(*factor)))?;
                }
            }
            Op::SoftmaxRows { input, temperature } => {
                if self.needs(*input) {
                    // dz_i = y_i (g_i - sum_j g_j y_j) / tau, per row.
                    let (p, q) = node.value.dims2()?;
                    let y = node.value.data();
                    let inv_tau = T::from_f64(1.0 / *temperature);
                    let mut delta = vec![T::zero(); p * q];
                    for i in 0..p {
                        let yrow = &y[i * q..(i + 1) * q];
                        let grow = &grad.data()[i * q..(i + 1) * q];
                        let dot = yrow
                            .iter()
                            .zip(grow)
                            .fold(T::zero(), |acc, (&yv, &gv)| acc + yv * gv);
                        for j in 0..q {
                            delta[i * q + j] = yrow[j] * (grow[j] - dot) * inv_tau;
                        }
                    }
                    Self::accumulate(grads, *input, Tensor::new(&[p, q], delta)?)?;
                }
            }
            Op::Silu(input) => {
                if self.needs(*input) {
                    let x = &self.nodes[input.0].value;
                    let delta = Tensor::new(
                        x.shape(),
                        x.data()
                            .iter()
                            .zip(grad.data())
                            .map(|(&xv, &g)| {
                                let sig = T::one() / (T::one() + (-xv).exp());
                                g * sig * (T::one() + xv * (T::one() - sig))
                            })
                            .collect(),
                    )?;
                    Self::accumulate(grads, *input, delta)?;
                }
            }
            Op::RmsNorm { input, gamma, eps } => {
                let (p, q) = self.nodes[input.0].value.dims2()?;
                let x = self.nodes[input.0].value.data();
                let g = self.nodes[gamma.0].value.data();
                if self.needs(*input) {
                    let mut delta = vec![T::zero(); p * q];
                    for i in 0..p {
                        let row = &x[i * q..(i + 1) * q];
                        let grow = &grad.data()[i * q..(i + 1) * q];
                        let ms = row.iter().fold(T::zero(), |a, &v| a + v * v).as_f64()
                            / q as f64;
                        let rms2 = ms + eps;
                        let inv_rms = 1.0 / rms2.sqrt();
                        // sum_i g_i * gamma_i * x_i
                        let dot = row
                            .iter()
                            .zip(grow)
                            .zip(g)
                            .fold(0.0, |acc, ((&xv, &gv), &gm)| {
                                acc + (gv * gm * xv).as_f64()
                            });
                        for j in 0..q {
                            let v = grow[j].as_f64() * g[j].as_f64() * inv_rms
                                - x[i * q + j].as_f64() * dot * inv_rms
                                    / (q as f64 * rms2);
                            delta[i * q + j] = T::from_f64(v);
                        }
                    }
                    Self::accumulate(grads, *input, Tensor::new(&[p, q], delta)?)?;
                }
                if self.needs(*gamma) {
                    let mut delta = vec![T::zero(); q];
                    for i in 0..p {
                        let row = &x[i * q..(i + 1) * q];
                        let grow = &grad.data()[i * q..(i + 1) * q];
                        let ms = row.iter().fold(T::zero(), |a, &v| a + v * v).as_f64()
                            / q as f64;
                        let inv_rms = T::from_f64(1.0 / (ms + eps).sqrt());
                        for j in 0..q {
                            delta[j] = delta[j] + grow[j] * row[j] * inv_rms;
                        }
                    }
                    Self::accumulate(grads, *gamma, Tensor::new(&[1, q], delta)?)?;
                }
            }
            Op::Embedding { table, ids } => {
                if self.needs(*table) {
                    let (v, d) = self.nodes[table.0].value.dims2()?;
                    let mut delta = vec![T::zero(); v * d];
                    for (row, &id_) in ids.iter().enumerate() {
                        for j in 0..d {
                            delta[id_ * d + j] = delta[id_ * d + j] + grad.data()[row * d + j];
                        }
                    }
                    Self::accumulate(grads, *table, Tensor::new(&[v, d], delta)?)?;
                }
            }
            Op::GatherCols { input, idx } => {
                if self.needs(*input) {
                    let (p, n) = self.nodes[input.0].value.dims2()?;
                    let k = idx[0].len();
                    let mut delta = vec![T::zero(); p * n];
                    for (i, row_idx) in idx.iter().enumerate() {
                        for (slot, &j) in row_idx.iter().enumerate() {
                            delta[i * n + j] = delta[i * n + j] + grad.data()[i * k + slot];
                        }
                    }
                    Self::accumulate(grads, *input, Tensor::new(&[p, n], delta)?)?;
                }
            }
            Op::RowSum(input) => {
                if self.needs(*input) {
                    let (p, q) = self.nodes[input.0].value.dims2()?;
                    let mut delta = vec![T::zero(); p * q];
                    for i in 0..p {
                        for j in 0..q {
                            delta[i * q + j] = grad.data()[i];
                        }
                    }
                    Self::accumulate(grads, *input, Tensor::new(&[p, q], delta)?)?;
                }
            }
            Op::SliceCols { input, start, len } => {
                if self.needs(*input) {
                    let (p, q) = self.nodes[input.0].value.dims2()?;
                    let mut delta = vec![T::zero(); p * q];
                    for i in 0..p {
                        for j in 0..*len {
                            delta[i * q + start + j] = grad.data()[i * len + j];
                        }
                    }
                    Self::accumulate(grads, *input, Tensor::new(&[p, q], delta)?)?;
                }
            }
            Op::SliceRows { input, start, len } => {
                if self.needs(*input) {
                    let (p, q) = self.nodes[input.0].value.dims2()?;
                    let mut delta = vec![T::zero(); p * q];
                    delta[start * q..(start + len) * q].copy_from_slice(grad.data());
                    Self::accumulate(grads, *input, Tensor::new(&[p, q], delta)?)?;
                }
            }
            Op::ConcatCols(parts) => {
                let p = node.value.dims2()?.0;
                let mut offset = 0;
                for &part in parts {
                    let q = self.nodes[part.0].value.dims2()?.1;
                    if self.needs(part) {
                        let total = node.value.dims2()?.1;
                        let mut delta = vec![T::zero(); p * q];
                        for i in 0..p {
                            delta[i * q..(i + 1) * q].copy_from_slice(
                                &grad.data()[i * total + offset..i * total + offset + q],
                            );
                        }
                        Self::accumulate(grads, part, Tensor::new(&[p, q], delta)?)?;
                    }
                    offset += q;
                }
            }
            Op::Transpose(input) => {
                if self.needs(*input) {
                    Self::accumulate(grads, *input, grad.transposed()?)?;
                }
            }
            Op::AddConst(input) => {
                if self.needs(*input) {
                    Self::accumulate(grads, *input, grad.clone())?;
                }
            }
            Op::CrossEntropyMean { logits, targets } => {
                if self.needs(*logits) {
                    // d logits = (softmax(row) - onehot(target)) / p, scaled
                    // by the incoming scalar grad.
                    let (p, n) = self.nodes[logits.0].value.dims2()?;
                    let src = self.nodes[logits.0].value.data();
                    let g0 = grad.data()[0];
                    let inv_p = T::from_f64(1.0 / p as f64);
                    let mut delta = vec![T::zero(); p * n];
                    let mut probs = vec![T::zero(); n];
                    for (i, &target) in targets.iter().enumerate() {
                        softmax_slice(&mut probs, &src[i * n..(i + 1) * n], 1.0)?;
                        for j in 0..n {
                            let indicator = if j == target { T::one() } else { T::zero() };
                            delta[i * n + j] = g0 * inv_p * (probs[j] - indicator);
                        }
                    }
                    Self::accumulate(grads, *logits, Tensor::new(&[p, n], delta)?)?;
                }
            }
            Op::ScalarCombine(terms) => {
                let g0 = grad.data()[0];
                for &(coeff, term) in terms {
                    if self.needs(term) {
                        let delta = Tensor::full(&[1, 1], g0 * T::from_f64(coeff));
                        Self::accumulate(grads, term, delta)?;
                    }
                }
            }
        }
        Ok(())
    }
}

/// Parameter gradients keyed by the caller-assigned ids.
pub struct Gradients<T: Element> {
    by_param: std::collections::BTreeMap<ParamId, Tensor<T>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.by_param.get(&id)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.by_param.keys().copied()
    }
}
