//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] is rebuilt for every forward pass. Nodes are appended in
//! evaluation order, so inputs always have smaller ids than their consumers and
//! the backward sweep is a single reverse scan. Gradients are held in `f64`
//! regardless of the storage type.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numerics::tensor::{expect_2d, kernels, Real, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Contiguous run of rows forming one causal sequence inside a packed batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    MatMulNt(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Tanh(NodeId),
    Gelu(NodeId),
    Softmax {
        x: NodeId,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        segments: Vec<Segment>,
        heads: usize,
        probs: Vec<Vec<f64>>,
    },
    Gather {
        table: NodeId,
        ids: Vec<usize>,
    },
    ConcatRows(Vec<NodeId>),
    SliceRows {
        x: NodeId,
        start: usize,
    },
    MeanRows(NodeId),
    NormalizeRows {
        x: NodeId,
        norms: Vec<f64>,
    },
    MaskedCrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<f64>,
        count: usize,
    },
    Sum(NodeId),
}

struct Node<T: Real> {
    op: Op,
    value: Arc<Tensor<T>>,
    requires_grad: bool,
}

pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
    names: Vec<(String, NodeId)>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn to_tensor<T: Real>(shape: &[usize], data: Vec<f64>, op: &'static str) -> Result<Tensor<T>> {
    let stored: Vec<T> = data.into_iter().map(T::from_f64).collect();
    if stored.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite { op });
    }
    Tensor::from_vec(shape, stored)
}

fn same_shape<T: Real>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Ok(())
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            names: Vec::new(),
        }
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

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, op: Op, value: Tensor<T>, inputs: &[NodeId]) -> NodeId {
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            op,
            value: Arc::new(value),
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Shared leaf; `requires_grad` marks it as a differentiation target.
    pub fn leaf(&mut self, value: Arc<Tensor<T>>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Trainable leaf tagged with a parameter name, see [`Graph::named_gradients`].
    pub fn named_leaf(&mut self, name: &str, value: Arc<Tensor<T>>) -> NodeId {
        let id = self.leaf(value, true);
        self.names.push((name.to_string(), id));
        id
    }

    /// Gradients of every named leaf, summed per name when a parameter was bound twice.
    pub fn named_gradients(
        &self,
        grads: &Gradients<T>,
    ) -> std::collections::BTreeMap<String, Vec<f64>> {
        let mut out: std::collections::BTreeMap<String, Vec<f64>> =
            std::collections::BTreeMap::new();
        for (name, id) in &self.names {
            let gv = grads.get_f64(*id);
            match out.get_mut(name) {
                Some(acc) => add_into(acc, &gv),
                None => {
                    out.insert(name.clone(), gv);
                }
            }
        }
        out
    }

    pub fn param(&mut self, value: Tensor<T>) -> NodeId {
        self.leaf(Arc::new(value), true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.leaf(Arc::new(value), false)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = expect_2d(av, "matmul")?;
        let (k2, n) = expect_2d(bv, "matmul")?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: av.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let out = kernels::matmul_nn(av.data(), bv.data(), m, k, n);
        let t = to_tensor(&[m, n], out, "matmul")?;
        Ok(self.push(Op::MatMul(a, b), t, &[a, b]))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = expect_2d(av, "matmul_nt")?;
        let (n, k2) = expect_2d(bv, "matmul_nt")?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul_nt",
                left: av.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let out = kernels::matmul_nt(av.data(), bv.data(), m, k, n);
        let t = to_tensor(&[m, n], out, "matmul_nt")?;
        Ok(self.push(Op::MatMulNt(a, b), t, &[a, b]))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape("add", av, bv)?;
        let out = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| x.to_f64() + y.to_f64())
            .collect();
        let t = to_tensor(av.shape(), out, "add")?;
        Ok(self.push(Op::Add(a, b), t, &[a, b]))
    }

    /// Adds a length-`d` vector to every row of an `[n×d]` matrix.
    pub fn add_row(&mut self, x: NodeId, row: NodeId) -> Result<NodeId> {
        let (xv, rv) = (self.value(x), self.value(row));
        let d = xv.cols();
        if rv.numel() != d {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                left: xv.shape().to_vec(),
                right: rv.shape().to_vec(),
            });
        }
        let r = rv.data();
        let out = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v.to_f64() + r[i % d].to_f64())
            .collect();
        let t = to_tensor(xv.shape(), out, "add_row")?;
        Ok(self.push(Op::AddRow(x, row), t, &[x, row]))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape("mul", av, bv)?;
        let out = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| x.to_f64() * y.to_f64())
            .collect();
        let t = to_tensor(av.shape(), out, "mul")?;
        Ok(self.push(Op::Mul(a, b), t, &[a, b]))
    }

    pub fn scale(&mut self, x: NodeId, s: f64) -> Result<NodeId> {
        let xv = self.value(x);
        let out = xv.data().iter().map(|v| v.to_f64() * s).collect();
        let t = to_tensor(xv.shape(), out, "scale")?;
        Ok(self.push(Op::Scale(x, s), t, &[x]))
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let out = xv.data().iter().map(|v| v.to_f64().tanh()).collect();
        let t = to_tensor(xv.shape(), out, "tanh")?;
        Ok(self.push(Op::Tanh(x), t, &[x]))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let out = xv
            .data()
            .iter()
            .map(|v| {
                let x = v.to_f64();
                0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
            })
            .collect();
        let t = to_tensor(xv.shape(), out, "gelu")?;
        Ok(self.push(Op::Gelu(x), t, &[x]))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let xv = self.value(x);
        let shape = xv.shape();
        if axis >= shape.len() {
            return Err(Error::invalid(format!(
                "softmax axis {axis} out of range for {shape:?}"
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = xv.data();
        let mut out = vec![0.0f64; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let max = (0..len)
                    .map(|j| src[at(j)].to_f64())
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for j in 0..len {
                    let e = (src[at(j)].to_f64() - max).exp();
                    out[at(j)] = e;
                    sum += e;
                }
                for j in 0..len {
                    out[at(j)] /= sum;
                }
            }
        }
        let t = to_tensor(shape, out, "softmax")?;
        Ok(self.push(
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            },
            t,
            &[x],
        ))
    }

    /// Row-wise layer normalization with learned gain and bias.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let d = xv.cols();
        if gv.numel() != d || bv.numel() != d {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                left: xv.shape().to_vec(),
                right: gv.shape().to_vec(),
            });
        }
        let n = xv.rows();
        let mut xhat = vec![0.0; n * d];
        let mut rstd = vec![0.0; n];
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            let row = &xv.data()[i * d..(i + 1) * d];
            let mean = row.iter().map(|v| v.to_f64()).sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v.to_f64() - mean).powi(2)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + LN_EPS).sqrt();
            rstd[i] = r;
            for j in 0..d {
                let h = (row[j].to_f64() - mean) * r;
                xhat[i * d + j] = h;
                out[i * d + j] = h * gv.data()[j].to_f64() + bv.data()[j].to_f64();
            }
        }
        let t = to_tensor(xv.shape(), out, "layer_norm")?;
        Ok(self.push(
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            t,
            &[x, gain, bias],
        ))
    }

    /// Multi-head causal self-attention over packed sequences.
    ///
    /// `q`, `k`, `v` are `[n×d]`; each segment attends only within itself and
    /// row `t` of a segment sees rows `0..=t`. Heads split `d` into equal
    /// contiguous column blocks.
    pub fn causal_attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        segments: &[Segment],
        heads: usize,
    ) -> Result<NodeId> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        same_shape("causal_attention", qv, kv)?;
        same_shape("causal_attention", qv, vv)?;
        let (n, d) = expect_2d(qv, "causal_attention")?;
        if heads == 0 || d % heads != 0 {
            return Err(Error::invalid(format!(
                "{d} columns do not split into {heads} heads"
            )));
        }
        let covered: usize = segments.iter().map(|s| s.len).sum();
        if covered != n || segments.iter().any(|s| s.start + s.len > n || s.len == 0) {
            return Err(Error::invalid("attention segments do not tile the rows"));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (qv.to_f64_vec(), kv.to_f64_vec(), vv.to_f64_vec());
        let mut out = vec![0.0; n * d];
        let mut probs = Vec::with_capacity(segments.len() * heads);
        for seg in segments {
            let len = seg.len;
            for h in 0..heads {
                let c0 = h * dh;
                let mut p = vec![0.0; len * len];
                for i in 0..len {
                    let qi = &qd[(seg.start + i) * d + c0..(seg.start + i) * d + c0 + dh];
                    let row = &mut p[i * len..(i + 1) * len];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..=i {
                        let kj = &kd[(seg.start + j) * d + c0..(seg.start + j) * d + c0 + dh];
                        let s = kernels::dot(qi, kj) * scale;
                        row[j] = s;
                        max = max.max(s);
                    }
                    let mut sum = 0.0;
                    for r in row.iter_mut().take(i + 1) {
                        *r = (*r - max).exp();
                        sum += *r;
                    }
                    for r in row.iter_mut().take(i + 1) {
                        *r /= sum;
                    }
                    let o = &mut out[(seg.start + i) * d + c0..(seg.start + i) * d + c0 + dh];
                    for j in 0..=i {
                        let pj = row[j];
                        let vj = &vd[(seg.start + j) * d + c0..(seg.start + j) * d + c0 + dh];
                        for (oc, &vc) in o.iter_mut().zip(vj) {
                            *oc += pj * vc;
                        }
                    }
                }
                probs.push(p);
            }
        }
        let t = to_tensor(&[n, d], out, "causal_attention")?;
        Ok(self.push(
            Op::Attention {
                q,
                k,
                v,
                segments: segments.to_vec(),
                heads,
                probs,
            },
            t,
            &[q, k, v],
        ))
    }

    /// Rows of a `[vocab×d]` table selected by `ids`.
    pub fn gather_rows(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let tv = self.value(table);
        let (rows, d) = expect_2d(tv, "gather_rows")?;
        if ids.is_empty() {
            return Err(Error::invalid("gather_rows with no ids"));
        }
        if let Some(bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::invalid(format!(
                "row id {bad} out of range for table of {rows}"
            )));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend(tv.row(i).iter().map(|v| v.to_f64()));
        }
        let t = to_tensor(&[ids.len(), d], out, "gather_rows")?;
        Ok(self.push(
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            t,
            &[table],
        ))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::invalid("concat_rows of nothing"));
        }
        let d = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut n = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.cols() != d {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    left: self.value(parts[0]).shape().to_vec(),
                    right: pv.shape().to_vec(),
                });
            }
            n += pv.rows();
            data.extend_from_slice(pv.data());
        }
        let t = Tensor::from_vec(&[n, d], data)?;
        Ok(self.push(Op::ConcatRows(parts.to_vec()), t, parts))
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let xv = self.value(x);
        let d = xv.cols();
        if len == 0 || start + len > xv.rows() {
            return Err(Error::invalid(format!(
                "slice_rows {start}..{} out of {} rows",
                start + len,
                xv.rows()
            )));
        }
        let t = Tensor::from_vec(&[len, d], xv.data()[start * d..(start + len) * d].to_vec())?;
        Ok(self.push(Op::SliceRows { x, start }, t, &[x]))
    }

    /// Column means: `[n×d] → [1×d]`.
    pub fn mean_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let (n, d) = (xv.rows(), xv.cols());
        let mut out = vec![0.0; d];
        for i in 0..n {
            for (o, v) in out.iter_mut().zip(xv.row(i)) {
                *o += v.to_f64();
            }
        }
        for o in &mut out {
            *o /= n as f64;
        }
        let t = to_tensor(&[1, d], out, "mean_rows")?;
        Ok(self.push(Op::MeanRows(x), t, &[x]))
    }

    /// Scales each row to unit L2 norm.
    pub fn normalize_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let (n, d) = (xv.rows(), xv.cols());
        let mut norms = vec![0.0; n];
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            let row = xv.row(i);
            let nrm = row
                .iter()
                .map(|v| v.to_f64() * v.to_f64())
                .sum::<f64>()
                .sqrt();
            if nrm < 1e-12 {
                return Err(Error::invalid("normalize_rows: zero-norm row"));
            }
            norms[i] = nrm;
            for j in 0..d {
                out[i * d + j] = row[j].to_f64() / nrm;
            }
        }
        let t = to_tensor(xv.shape(), out, "normalize_rows")?;
        Ok(self.push(Op::NormalizeRows { x, norms }, t, &[x]))
    }

    /// Mean over rows with `mask[i]` set of `-log softmax(logits[i])[targets[i]]`.
    /// Rows with a cleared mask bit contribute nothing to value or gradient.
    pub fn masked_cross_entropy(
        &mut self,
        logits: NodeId,
        targets: &[usize],
        mask: &[bool],
    ) -> Result<NodeId> {
        let lv = self.value(logits);
        let (n, vocab) = expect_2d(lv, "masked_cross_entropy")?;
        if targets.len() != n || mask.len() != n {
            return Err(Error::ShapeMismatch {
                op: "masked_cross_entropy",
                left: lv.shape().to_vec(),
                right: vec![targets.len(), mask.len()],
            });
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::invalid(
                "masked_cross_entropy: mask selects no positions",
            ));
        }
        let mut probs = vec![0.0; n * vocab];
        let mut total = 0.0;
        for i in 0..n {
            if !mask[i] {
                continue;
            }
            if targets[i] >= vocab {
                return Err(Error::invalid(format!(
                    "target {} out of vocabulary {vocab}",
                    targets[i]
                )));
            }
            let row = lv.row(i);
            let max = row
                .iter()
                .map(|v| v.to_f64())
                .fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (j, v) in row.iter().enumerate() {
                let e = (v.to_f64() - max).exp();
                probs[i * vocab + j] = e;
                sum += e;
            }
            for p in &mut probs[i * vocab..(i + 1) * vocab] {
                *p /= sum;
            }
            total += -(row[targets[i]].to_f64() - max - sum.ln());
        }
        let t = to_tensor(&[1], vec![total / count as f64], "masked_cross_entropy")?;
        Ok(self.push(
            Op::MaskedCrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
                count,
            },
            t,
            &[logits],
        ))
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.value(x).data().iter().map(|v| v.to_f64()).sum();
        let t = to_tensor(&[1], vec![s], "sum")?;
        Ok(self.push(Op::Sum(x), t, &[x]))
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: NodeId) -> Result<Gradients<T>> {
        if !self.value(root).is_scalar() {
            return Err(Error::invalid(format!(
                "backward needs a scalar root, got shape {:?}",
                self.value(root).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite { op: "backward" });
            }
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let shapes = self
            .nodes
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        let trackable = self.nodes.iter().map(|n| n.requires_grad).collect();
        Ok(Gradients {
            grads,
            shapes,
            trackable,
            _marker: std::marker::PhantomData,
        })
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn propagate(&self, node: &Node<T>, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |id: NodeId, delta: &dyn Fn(&mut [f64])| {
            if !self.wants(id) {
                return;
            }
            let len = self.nodes[id.0].value.numel();
            let buf = grads[id.0].get_or_insert_with(|| vec![0.0; len]);
            delta(buf);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                if self.wants(*a) {
                    let da = kernels::matmul_nt(g, bv.data(), m, n, k);
                    acc(*a, &|buf| add_into(buf, &da));
                }
                if self.wants(*b) {
                    let db = kernels::matmul_tn(av.data(), g, m, k, n);
                    acc(*b, &|buf| add_into(buf, &db));
                }
            }
            Op::MatMulNt(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[0];
                if self.wants(*a) {
                    let da = kernels::matmul_nn(g, bv.data(), m, n, k);
                    acc(*a, &|buf| add_into(buf, &da));
                }
                if self.wants(*b) {
                    let db = kernels::matmul_tn(g, av.data(), m, n, k);
                    acc(*b, &|buf| add_into(buf, &db));
                }
            }
            Op::Add(a, b) => {
                acc(*a, &|buf| add_into(buf, g));
                acc(*b, &|buf| add_into(buf, g));
            }
            Op::AddRow(x, row) => {
                acc(*x, &|buf| add_into(buf, g));
                let d = self.value(*row).numel();
                acc(*row, &|buf| {
                    for (i, gv) in g.iter().enumerate() {
                        buf[i % d] += gv;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, &|buf| {
                    for ((o, gv), y) in buf.iter_mut().zip(g).zip(bv.data()) {
                        *o += gv * y.to_f64();
                    }
                });
                acc(*b, &|buf| {
                    for ((o, gv), x) in buf.iter_mut().zip(g).zip(av.data()) {
                        *o += gv * x.to_f64();
                    }
                });
            }
            Op::Scale(x, s) => acc(*x, &|buf| {
                for (o, gv) in buf.iter_mut().zip(g) {
                    *o += gv * s;
                }
            }),
            Op::Tanh(x) => {
                let y = &node.value;
                acc(*x, &|buf| {
                    for ((o, gv), yv) in buf.iter_mut().zip(g).zip(y.data()) {
                        let t = yv.to_f64();
                        *o += gv * (1.0 - t * t);
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                acc(*x, &|buf| {
                    for ((o, gv), v) in buf.iter_mut().zip(g).zip(xv.data()) {
                        let x = v.to_f64();
                        let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
                        let du = GELU_C * (1.0 + 3.0 * GELU_K * x * x);
                        *o += gv * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du);
                    }
                });
            }
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            } => {
                let y = &node.value;
                let (outer, len, inner) = (*outer, *len, *inner);
                acc(*x, &|buf| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * len + j) * inner + i;
                            let dot: f64 =
                                (0..len).map(|j| g[at(j)] * y.data()[at(j)].to_f64()).sum();
                            for j in 0..len {
                                buf[at(j)] += y.data()[at(j)].to_f64() * (g[at(j)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let gv = self.value(*gain);
                let d = gv.numel();
                let n = rstd.len();
                acc(*gain, &|buf| {
                    for i in 0..n {
                        for j in 0..d {
                            buf[j] += g[i * d + j] * xhat[i * d + j];
                        }
                    }
                });
                acc(*bias, &|buf| {
                    for i in 0..n {
                        for j in 0..d {
                            buf[j] += g[i * d + j];
                        }
                    }
                });
                acc(*x, &|buf| {
                    for i in 0..n {
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for j in 0..d {
                            let dh = g[i * d + j] * gv.data()[j].to_f64();
                            mean_dh += dh;
                            mean_dh_h += dh * xhat[i * d + j];
                        }
                        mean_dh /= d as f64;
                        mean_dh_h /= d as f64;
                        for j in 0..d {
                            let dh = g[i * d + j] * gv.data()[j].to_f64();
                            buf[i * d + j] +=
                                rstd[i] * (dh - mean_dh - xhat[i * d + j] * mean_dh_h);
                        }
                    }
                });
            }
            Op::Attention {
                q,
                k,
                v,
                segments,
                heads,
                probs,
            } => self.attention_backward(*q, *k, *v, segments, *heads, probs, g, grads),
            Op::Gather { table, ids } => {
                let d = self.value(*table).cols();
                acc(*table, &|buf| {
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            buf[id * d + j] += g[r * d + j];
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    let slice = &g[off..off + len];
                    acc(p, &|buf| add_into(buf, slice));
                    off += len;
                }
            }
            Op::SliceRows { x, start } => {
                let d = self.value(*x).cols();
                let off = start * d;
                acc(*x, &|buf| add_into(&mut buf[off..off + g.len()], g));
            }
            Op::MeanRows(x) => {
                let xv = self.value(*x);
                let (n, d) = (xv.rows(), xv.cols());
                acc(*x, &|buf| {
                    for i in 0..n {
                        for j in 0..d {
                            buf[i * d + j] += g[j] / n as f64;
                        }
                    }
                });
            }
            Op::NormalizeRows { x, norms } => {
                let y = &node.value;
                let d = y.cols();
                acc(*x, &|buf| {
                    for (i, nrm) in norms.iter().enumerate() {
                        let yr = &y.data()[i * d..(i + 1) * d];
                        let gr = &g[i * d..(i + 1) * d];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a.to_f64() * b).sum();
                        for j in 0..d {
                            buf[i * d + j] += (gr[j] - yr[j].to_f64() * dot) / nrm;
                        }
                    }
                });
            }
            Op::MaskedCrossEntropy {
                logits,
                targets,
                mask,
                probs,
                count,
            } => {
                let vocab = self.value(*logits).cols();
                let s = g[0] / *count as f64;
                acc(*logits, &|buf| {
                    for (i, &m) in mask.iter().enumerate() {
                        if !m {
                            continue;
                        }
                        for j in 0..vocab {
                            let onehot = if j == targets[i] { 1.0 } else { 0.0 };
                            buf[i * vocab + j] += s * (probs[i * vocab + j] - onehot);
                        }
                    }
                });
            }
            Op::Sum(x) => acc(*x, &|buf| {
                for o in buf.iter_mut() {
                    *o += g[0];
                }
            }),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        segments: &[Segment],
        heads: usize,
        probs: &[Vec<f64>],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (qv.to_f64_vec(), kv.to_f64_vec(), vv.to_f64_vec());
        let mut dq = vec![0.0; qd.len()];
        let mut dk = vec![0.0; kd.len()];
        let mut dv = vec![0.0; vd.len()];
        for (si, seg) in segments.iter().enumerate() {
            let len = seg.len;
            for h in 0..heads {
                let p = &probs[si * heads + h];
                let c0 = h * dh;
                let col = |row: usize| (seg.start + row) * d + c0;
                for i in 0..len {
                    let gi = &g[col(i)..col(i) + dh];
                    // dP_ij = dO_i · v_j, then softmax backward
                    let mut dp = vec![0.0; i + 1];
                    for (j, dpj) in dp.iter_mut().enumerate() {
                        *dpj = kernels::dot(gi, &vd[col(j)..col(j) + dh]);
                    }
                    let prow = &p[i * len..i * len + i + 1];
                    let inner: f64 = prow.iter().zip(&dp).map(|(a, b)| a * b).sum();
                    for j in 0..=i {
                        let pij = prow[j];
                        for c in 0..dh {
                            dv[col(j) + c] += pij * gi[c];
                        }
                        let ds = pij * (dp[j] - inner) * scale;
                        if ds != 0.0 {
                            for c in 0..dh {
                                dq[col(i) + c] += ds * kd[col(j) + c];
                                dk[col(j) + c] += ds * qd[col(i) + c];
                            }
                        }
                    }
                }
            }
        }
        for (id, delta) in [(q, dq), (k, dk), (v, dv)] {
            if self.wants(id) {
                let len = delta.len();
                add_into(grads[id.0].get_or_insert_with(|| vec![0.0; len]), &delta);
            }
        }
    }
}

fn add_into(buf: &mut [f64], delta: &[f64]) {
    for (o, d) in buf.iter_mut().zip(delta) {
        *o += d;
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients<T: Real> {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
    trackable: Vec<bool>,
    _marker: std::marker::PhantomData<T>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the root with respect to `id`; zeros if nothing flowed there.
    pub fn get(&self, id: NodeId) -> Tensor<T> {
        let shape = &self.shapes[id.0];
        match &self.grads[id.0] {
            Some(g) => Tensor::from_vec(shape, g.iter().map(|&x| T::from_f64(x)).collect())
                .expect("gradient shape mirrors value shape"),
            None => Tensor::zeros(shape),
        }
    }

    /// Full-precision gradient values.
    pub fn get_f64(&self, id: NodeId) -> Vec<f64> {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => vec![0.0; self.shapes[id.0].iter().product()],
        }
    }

    pub fn is_tracked(&self, id: NodeId) -> bool {
        self.trackable[id.0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::Rng;

    fn grad_check(inputs: &[Tensor<f64>], build: &crate::numerics::gradcheck::Build<'_>) -> f64 {
        crate::numerics::gradcheck::check_inputs(inputs, build, usize::MAX, 1e-3, &mut Rng::new(0))
            .unwrap()
            .worst
    }

    fn rand(shape: &[usize], seed: u64) -> Tensor<f64> {
        Tensor::randn(shape, 1.0, &mut Rng::new(seed))
    }

    /// Reduces any node to a scalar with a fixed random weighting so every
    /// output coordinate matters.
    fn weigh(g: &mut Graph<f64>, x: NodeId, seed: u64) -> Result<NodeId> {
        let w = rand(g.value(x).shape(), seed);
        let w = g.constant(w);
        let p = g.mul(x, w)?;
        g.sum(p)
    }

    #[test]
    fn square_derivative() {
        let mut g = Graph::<f32>::new();
        let x = g.param(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).item(), 6.0);
    }

    #[test]
    fn constant_has_zero_gradient() {
        let mut g = Graph::<f32>::new();
        let x = g.param(Tensor::scalar(2.0));
        let c = g.constant(Tensor::scalar(5.0));
        let s = g.sum(c).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).item(), 0.0);
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut g = Graph::<f32>::new();
        let x = g.param(Tensor::zeros(&[2, 2]));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn gradcheck_matmuls() {
        let e = grad_check(&[rand(&[3, 4], 1), rand(&[4, 5], 2)], &|g, ids| {
            let y = g.matmul(ids[0], ids[1])?;
            weigh(g, y, 9)
        });
        assert!(e < 1e-3, "{e}");
        let e = grad_check(&[rand(&[3, 4], 3), rand(&[5, 4], 4)], &|g, ids| {
            let y = g.matmul_nt(ids[0], ids[1])?;
            weigh(g, y, 9)
        });
        assert!(e < 1e-3, "{e}");
    }

    #[test]
    fn gradcheck_elementwise() {
        let e = grad_check(
            &[rand(&[3, 4], 5), rand(&[3, 4], 6), rand(&[4], 7)],
            &|g, ids| {
                let a = g.add(ids[0], ids[1])?;
                let m = g.mul(a, ids[1])?;
                let r = g.add_row(m, ids[2])?;
                let s = g.scale(r, 0.7)?;
                let t = g.tanh(s)?;
                let u = g.gelu(t)?;
                weigh(g, u, 11)
            },
        );
        assert!(e < 1e-3, "{e}");
    }

    #[test]
    fn gradcheck_softmax_axes() {
        for axis in 0..3 {
            let e = grad_check(&[rand(&[2, 3, 4], 8)], &|g, ids| {
                let y = g.softmax(ids[0], axis)?;
                weigh(g, y, 12)
            });
            assert!(e < 1e-3, "axis {axis}: {e}");
        }
    }

    #[test]
    fn gradcheck_layer_norm() {
        let e = grad_check(
            &[rand(&[3, 6], 13), rand(&[6], 14), rand(&[6], 15)],
            &|g, ids| {
                let y = g.layer_norm(ids[0], ids[1], ids[2])?;
                weigh(g, y, 16)
            },
        );
        assert!(e < 1e-3, "{e}");
    }

    #[test]
    fn gradcheck_attention() {
        let segs = [Segment { start: 0, len: 3 }, Segment { start: 3, len: 4 }];
        let e = grad_check(
            &[rand(&[7, 8], 17), rand(&[7, 8], 18), rand(&[7, 8], 19)],
            &|g, ids| {
                let y = g.causal_attention(ids[0], ids[1], ids[2], &segs, 2)?;
                weigh(g, y, 20)
            },
        );
        assert!(e < 1e-3, "{e}");
    }

    #[test]
    fn gradcheck_rows_ops() {
        let e = grad_check(&[rand(&[5, 4], 21), rand(&[2, 4], 22)], &|g, ids| {
            let gathered = g.gather_rows(ids[0], &[1, 3, 1, 0])?;
            let cat = g.concat_rows(&[gathered, ids[1]])?;
            let sl = g.slice_rows(cat, 1, 4)?;
            let mean = g.mean_rows(sl)?;
            let both = g.concat_rows(&[mean, sl])?;
            let n = g.normalize_rows(both)?;
            weigh(g, n, 23)
        });
        assert!(e < 1e-3, "{e}");
    }

    #[test]
    fn gradcheck_masked_cross_entropy() {
        let e = grad_check(&[rand(&[5, 7], 24)], &|g, ids| {
            g.masked_cross_entropy(ids[0], &[1, 6, 0, 2, 3], &[true, false, true, true, false])
        });
        assert!(e < 1e-3, "{e}");
    }

    #[test]
    fn softmax_basics() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::from_vec(&[3], vec![0.0, 0.0, 0.0]).unwrap());
        let y = g.softmax(x, 0).unwrap();
        for v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-7);
        }

        let mut rng = Rng::new(4);
        let base = Tensor::<f32>::randn(&[8], 1.0, &mut rng);
        let shifted =
            Tensor::from_vec(&[8], base.data().iter().map(|v| v + 100.0).collect()).unwrap();
        let a = g.constant(base.clone());
        let b = g.constant(shifted);
        let ya = g.softmax(a, 0).unwrap();
        let yb = g.softmax(b, 0).unwrap();
        assert!(g.value(ya).max_abs_diff(g.value(yb)) < 1e-6);

        let denom: f64 = base.data().iter().map(|v| (*v as f64).exp()).sum();
        for (got, v) in g.value(ya).data().iter().zip(base.data()) {
            assert!((*got as f64 - (*v as f64).exp() / denom).abs() < 1e-6);
        }
    }

    #[test]
    fn masked_cross_entropy_values() {
        let mut g = Graph::<f32>::new();
        let logits = g.constant(Tensor::zeros(&[4, 32]));
        let l = g
            .masked_cross_entropy(logits, &[0, 5, 9, 31], &[true; 4])
            .unwrap();
        assert!((g.value(l).item() as f64 - 32f64.ln()).abs() < 1e-6);

        assert!(g
            .masked_cross_entropy(logits, &[0; 4], &[false; 4])
            .is_err());

        // token-by-token oracle
        let mut rng = Rng::new(31);
        let raw = Tensor::<f32>::randn(&[6, 10], 2.0, &mut rng);
        let targets = [3usize, 1, 9, 0, 4, 4];
        let mask = [true, false, true, true, false, true];
        let ln = g.constant(raw.clone());
        let got = g.masked_cross_entropy(ln, &targets, &mask).unwrap();
        let mut total = 0.0;
        let mut cnt = 0.0;
        for i in 0..6 {
            if !mask[i] {
                continue;
            }
            let row: Vec<f64> = raw.row(i).iter().map(|&v| v as f64).collect();
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            total += -(row[targets[i]].exp() / z).ln();
            cnt += 1.0;
        }
        assert!((g.value(got).item() as f64 - total / cnt).abs() < 1e-6);

        // rows with mask=0 are invisible
        let mut perturbed = raw.clone();
        for j in 0..10 {
            perturbed.data_mut()[10 + j] += 5.0;
            perturbed.data_mut()[40 + j] -= 3.0;
        }
        let pn = g.constant(perturbed);
        let got2 = g.masked_cross_entropy(pn, &targets, &mask).unwrap();
        assert_eq!(
            g.value(got).item().to_bits(),
            g.value(got2).item().to_bits()
        );
    }

    #[test]
    fn masked_rows_get_zero_gradient() {
        let mut g = Graph::<f32>::new();
        let mut rng = Rng::new(2);
        let logits = g.param(Tensor::randn(&[3, 5], 1.0, &mut rng));
        let l = g
            .masked_cross_entropy(logits, &[0, 1, 2], &[true, false, true])
            .unwrap();
        let grad = g.backward(l).unwrap().get(logits);
        assert!(grad.row(1).iter().all(|&v| v == 0.0));
        assert!(grad.row(0).iter().any(|&v| v != 0.0));
    }

    #[test]
    fn attention_is_causal() {
        let mut rng = Rng::new(6);
        let q = Tensor::<f32>::randn(&[5, 8], 1.0, &mut rng);
        let k = Tensor::<f32>::randn(&[5, 8], 1.0, &mut rng);
        let v = Tensor::<f32>::randn(&[5, 8], 1.0, &mut rng);
        let run = |k: &Tensor<f32>, v: &Tensor<f32>| {
            let mut g = Graph::<f32>::new();
            let (a, b, c) = (
                g.constant(q.clone()),
                g.constant(k.clone()),
                g.constant(v.clone()),
            );
            let o = g
                .causal_attention(a, b, c, &[Segment { start: 0, len: 5 }], 2)
                .unwrap();
            g.value(o).clone()
        };
        let base = run(&k, &v);
        let mut k2 = k.clone();
        let mut v2 = v.clone();
        for j in 0..8 {
            k2.data_mut()[3 * 8 + j] += 1.0;
            v2.data_mut()[3 * 8 + j] -= 1.0;
        }
        let pert = run(&k2, &v2);
        assert_eq!(&base.data()[..24], &pert.data()[..24]);
        assert_ne!(&base.data()[24..32], &pert.data()[24..32]);
    }

    #[test]
    fn non_finite_is_an_error() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::scalar(f32::MAX));
        let y = g.scale(x, 10.0).map(|id| g.value(id).item());
        assert!(matches!(y, Err(Error::NonFinite { .. })));
    }
}
