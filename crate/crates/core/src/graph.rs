//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation appends a node holding its output value, so the node list
//! is topologically ordered by construction. [`Graph::backward`] walks it once
//! in reverse.
//!
//! Primitive set: matmul, add (plus row-broadcast bias add), scale, transpose,
//! reshape, gather-rows, scatter-rows, layer norm, softmax, GELU, ReLU,
//! mean-pool over rows, MSE over rows and cross-entropy. Anything else is
//! composed from these.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{matmul_into, transpose_raw, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<S> {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Scale(NodeId, S),
    Transpose(NodeId),
    Reshape(NodeId),
    GatherRows(NodeId, Vec<usize>),
    ScatterRows(NodeId, Vec<usize>),
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, xhat: Vec<S>, rstd: Vec<S> },
    Softmax(NodeId),
    Gelu(NodeId),
    Relu(NodeId),
    MeanRows(NodeId),
    Mse(NodeId, NodeId),
    CrossEntropy { logits: NodeId, probs: Vec<S>, labels: Vec<usize> },
}

impl<S> Op<S> {
    fn tag(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::AddBias(..) => "add_bias",
            Op::Scale(..) => "scale",
            Op::Transpose(..) => "transpose",
            Op::Reshape(..) => "reshape",
            Op::GatherRows(..) => "gather_rows",
            Op::ScatterRows(..) => "scatter_rows",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Softmax(..) => "softmax",
            Op::Gelu(..) => "gelu",
            Op::Relu(..) => "relu",
            Op::MeanRows(..) => "mean_rows",
            Op::Mse(..) => "mse",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

#[derive(Clone, Debug)]
struct Node<S> {
    op: Op<S>,
    value: Tensor<S>,
    requires_grad: bool,
}

/// Recording of one forward computation.
#[derive(Clone, Debug, Default)]
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Clone, Debug)]
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
    shapes: Vec<Vec<usize>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient of the loss w.r.t. `id`; zeros when `id` did not contribute.
    pub fn get(&self, id: NodeId) -> Tensor<S> {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.shapes[id.0].clone()),
        }
    }

    /// Whether any gradient reached `id`.
    pub fn reached(&self, id: NodeId) -> bool {
        self.grads[id.0].is_some()
    }
}

const GELU_C: f64 = 0.044_715;

fn gelu_parts<S: Scalar>(x: S) -> (S, S) {
    let c = S::lit((2.0 / std::f64::consts::PI).sqrt());
    let k = S::lit(GELU_C);
    let half = S::lit(0.5);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let y = half * x * (S::one() + t);
    let dy = half * (S::one() + t)
        + half * x * (S::one() - t * t) * c * (S::one() + S::lit(3.0) * k * x * x);
    (y, dy)
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<S> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Operation tag of a node (`"matmul"`, `"leaf"`, ...).
    pub fn op_tag(&self, id: NodeId) -> &'static str {
        self.nodes[id.0].op.tag()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, op: Op<S>, value: Tensor<S>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { op, value, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor<S>) -> NodeId {
        self.push(Op::Leaf, t, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<S>) -> NodeId {
        self.push(Op::Leaf, t, false)
    }

    fn dims2(&self, id: NodeId, op: &'static str) -> Result<(usize, usize)> {
        let shape = self.shape(id);
        if shape.len() != 2 {
            return Err(Error::Dimension { op, lhs: shape.to_vec(), rhs: vec![] });
        }
        Ok((shape[0], shape[1]))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![S::zero(); m * n];
        matmul_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::MatMul(a, b), value, rg))
    }

    /// Elementwise sum of equally shaped tensors.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension {
                op: "add",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let data: Vec<S> =
            self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::Add(a, b), value, rg))
    }

    /// Adds a length-`d` bias to every row of an `[…, d]` tensor.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let d = self.value(x).cols();
        if self.value(bias).len() != d {
            return Err(Error::Dimension {
                op: "add_bias",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let b = self.value(bias).data();
        let data: Vec<S> =
            self.value(x).data().iter().enumerate().map(|(i, &v)| v + b[i % d]).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        let rg = self.rg(&[x, bias]);
        Ok(self.push(Op::AddBias(x, bias), value, rg))
    }

    pub fn scale(&mut self, x: NodeId, c: S) -> NodeId {
        let value = self.value(x).map(|v| v * c);
        let rg = self.rg(&[x]);
        self.push(Op::Scale(x, c), value, rg)
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let (r, c) = self.dims2(x, "transpose")?;
        let value = Tensor::new(vec![c, r], transpose_raw(self.value(x).data(), r, c))?;
        let rg = self.rg(&[x]);
        Ok(self.push(Op::Transpose(x), value, rg))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let value = self.value(x).reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(Op::Reshape(x), value, rg))
    }

    /// Picks rows of `x` (viewed as `[rows, cols]`) in the order of `idx`.
    /// Indices may repeat; gradients of repeated rows accumulate.
    pub fn gather_rows(&mut self, x: NodeId, idx: &[usize]) -> Result<NodeId> {
        let src = self.value(x);
        let (n, d) = (src.rows(), src.cols());
        if idx.is_empty() {
            return Err(Error::contract("gather_rows with no indices"));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::contract(format!("gather_rows index {bad} out of range for {n} rows")));
        }
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(src.row(i));
        }
        let value = Tensor::new(vec![idx.len(), d], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(Op::GatherRows(x, idx.to_vec()), value, rg))
    }

    /// Places row `k` of `x` at row `idx[k]` of an `[n, cols]` zero tensor.
    /// Indices must be distinct.
    pub fn scatter_rows(&mut self, x: NodeId, idx: &[usize], n: usize) -> Result<NodeId> {
        let src = self.value(x);
        let d = src.cols();
        if src.rows() != idx.len() {
            return Err(Error::contract(format!(
                "scatter_rows: {} rows but {} target indices",
                src.rows(),
                idx.len()
            )));
        }
        let mut seen = vec![false; n];
        for &i in idx {
            if i >= n || seen[i] {
                return Err(Error::contract(format!("scatter_rows: bad or repeated index {i} (n = {n})")));
            }
            seen[i] = true;
        }
        let mut data = vec![S::zero(); n * d];
        for (k, &i) in idx.iter().enumerate() {
            data[i * d..(i + 1) * d].copy_from_slice(src.row(k));
        }
        let value = Tensor::new(vec![n, d], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(Op::ScatterRows(x, idx.to_vec()), value, rg))
    }

    /// Normalizes each row to zero mean and unit variance, then applies the
    /// affine `gamma * x̂ + beta`.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: S) -> Result<NodeId> {
        let xv = self.value(x);
        let d = xv.cols();
        if d == 0 || self.value(gamma).len() != d || self.value(beta).len() != d {
            return Err(Error::Dimension {
                op: "layer_norm",
                lhs: xv.shape().to_vec(),
                rhs: self.shape(gamma).to_vec(),
            });
        }
        if eps <= S::zero() {
            return Err(Error::contract("layer_norm eps must be positive"));
        }
        let rows = xv.rows();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let df = S::from_usize_lossy(d);
        let mut xhat = vec![S::zero(); rows * d];
        let mut rstd = vec![S::zero(); rows];
        let mut out = vec![S::zero(); rows * d];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<S>() / df;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / df;
            let rs = S::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = g[j] * h + b[j];
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(Op::LayerNorm { x, gamma, beta, xhat, rstd }, value, rg))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let d = xv.cols();
        let mut out = xv.to_vec();
        for row in out.chunks_mut(d) {
            softmax_in_place(row);
        }
        let value = Tensor::new(xv.shape().to_vec(), out).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(Op::Softmax(x), value, rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(|v| gelu_parts(v).0);
        let rg = self.rg(&[x]);
        self.push(Op::Gelu(x), value, rg)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(|v| if v > S::zero() { v } else { S::zero() });
        let rg = self.rg(&[x]);
        self.push(Op::Relu(x), value, rg)
    }

    /// Mean over rows: `[n, d] -> [1, d]`.
    pub fn mean_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let (n, d) = (xv.rows(), xv.cols());
        let nf = S::from_usize_lossy(n);
        let mut out = vec![S::zero(); d];
        for r in 0..n {
            for (o, &v) in out.iter_mut().zip(xv.row(r)) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= nf);
        let value = Tensor::new(vec![1, d], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(Op::MeanRows(x), value, rg))
    }

    /// `(1/rows) Σ_rows Σ_cols (pred − target)²`: squared error summed within
    /// each row, averaged over rows.
    pub fn mse_rows(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId> {
        if self.shape(pred) != self.shape(target) {
            return Err(Error::Dimension {
                op: "mse",
                lhs: self.shape(pred).to_vec(),
                rhs: self.shape(target).to_vec(),
            });
        }
        let p = self.value(pred);
        let t = self.value(target);
        let rows = S::from_usize_lossy(p.rows());
        let sse: S = p.data().iter().zip(t.data()).map(|(&a, &b)| (a - b) * (a - b)).sum();
        let value = Tensor::scalar(sse / rows);
        let rg = self.rg(&[pred, target]);
        Ok(self.push(Op::Mse(pred, target), value, rg))
    }

    /// Mean over rows of `−log softmax(logits)[label]`, via log-sum-exp.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let lv = self.value(logits);
        let (b, k) = (lv.rows(), lv.cols());
        if labels.len() != b {
            return Err(Error::contract(format!("cross_entropy: {b} rows but {} labels", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::contract(format!("cross_entropy: label {bad} out of range for {k} classes")));
        }
        let mut probs = lv.to_vec();
        let mut total = S::zero();
        for (r, row) in probs.chunks_mut(k).enumerate() {
            let m = row.iter().copied().fold(S::neg_infinity(), S::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<S>().ln();
            total += lse - row[labels[r]];
            softmax_in_place(row);
        }
        let value = Tensor::scalar(total / S::from_usize_lossy(b));
        let rg = self.rg(&[logits]);
        Ok(self.push(Op::CrossEntropy { logits, probs, labels: labels.to_vec() }, value, rg))
    }

    /// Sum of all elements, composed as `n · mean_rows(reshape(x, [n, 1]))`.
    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId> {
        let n = self.value(x).len();
        let col = self.reshape(x, vec![n, 1])?;
        let m = self.mean_rows(col)?;
        Ok(self.scale(m, S::from_usize_lossy(n)))
    }

    /// Reverse sweep from a scalar `loss` node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<S>> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let shapes: Vec<Vec<usize>> = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let mut grads: Vec<Option<Vec<S>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![S::one()]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let grads = grads
            .into_iter()
            .zip(&shapes)
            .map(|(g, s)| g.map(|g| Tensor::new(s.clone(), g).expect("gradient shape")))
            .collect();
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<S>>], id: NodeId, contrib: Vec<S>) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(acc) => acc.iter_mut().zip(contrib).for_each(|(a, c)| *a += c),
            slot @ None => *slot = Some(contrib),
        }
    }

    fn propagate(&self, node: &Node<S>, g: &[S], grads: &mut [Option<Vec<S>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                if self.requires_grad(*a) {
                    let bt = transpose_raw(bv.data(), k, n);
                    let mut da = vec![S::zero(); m * k];
                    matmul_into(g, &bt, &mut da, m, n, k);
                    self.accumulate(grads, *a, da);
                }
                if self.requires_grad(*b) {
                    let at = transpose_raw(av.data(), m, k);
                    let mut db = vec![S::zero(); k * n];
                    matmul_into(&at, g, &mut db, k, m, n);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::AddBias(x, bias) => {
                self.accumulate(grads, *x, g.to_vec());
                let d = self.value(*bias).len();
                let mut db = vec![S::zero(); d];
                for row in g.chunks(d) {
                    db.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
                }
                self.accumulate(grads, *bias, db);
            }
            Op::Scale(x, c) => {
                self.accumulate(grads, *x, g.iter().map(|&v| v * *c).collect());
            }
            Op::Transpose(x) => {
                let (r, c) = (node.value.shape()[0], node.value.shape()[1]);
                self.accumulate(grads, *x, transpose_raw(g, r, c));
            }
            Op::Reshape(x) => self.accumulate(grads, *x, g.to_vec()),
            Op::GatherRows(x, idx) => {
                let src = self.value(*x);
                let d = src.cols();
                let mut dx = vec![S::zero(); src.len()];
                for (k, &i) in idx.iter().enumerate() {
                    for j in 0..d {
                        dx[i * d + j] += g[k * d + j];
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::ScatterRows(x, idx) => {
                let d = node.value.cols();
                let mut dx = Vec::with_capacity(idx.len() * d);
                for &i in idx {
                    dx.extend_from_slice(&g[i * d..(i + 1) * d]);
                }
                self.accumulate(grads, *x, dx);
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let d = self.value(*gamma).len();
                let gam = self.value(*gamma).data();
                let df = S::from_usize_lossy(d);
                let mut dgamma = vec![S::zero(); d];
                let mut dbeta = vec![S::zero(); d];
                let mut dx = vec![S::zero(); g.len()];
                for (r, &rs) in rstd.iter().enumerate() {
                    let gr = &g[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    let mut mean_dh = S::zero();
                    let mut mean_dh_h = S::zero();
                    for j in 0..d {
                        dgamma[j] += gr[j] * hr[j];
                        dbeta[j] += gr[j];
                        let dh = gr[j] * gam[j];
                        mean_dh += dh;
                        mean_dh_h += dh * hr[j];
                    }
                    mean_dh /= df;
                    mean_dh_h /= df;
                    for j in 0..d {
                        let dh = gr[j] * gam[j];
                        dx[r * d + j] = rs * (dh - mean_dh - hr[j] * mean_dh_h);
                    }
                }
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *gamma, dgamma);
                self.accumulate(grads, *beta, dbeta);
            }
            Op::Softmax(x) => {
                let d = node.value.cols();
                let y = node.value.data();
                let mut dx = vec![S::zero(); g.len()];
                for ((dr, yr), gr) in dx.chunks_mut(d).zip(y.chunks(d)).zip(g.chunks(d)) {
                    let dot: S = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..d {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                let dx = xv.iter().zip(g).map(|(&v, &gv)| gv * gelu_parts(v).1).collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let dx = xv.iter().zip(g).map(|(&v, &gv)| if v > S::zero() { gv } else { S::zero() }).collect();
                self.accumulate(grads, *x, dx);
            }
            Op::MeanRows(x) => {
                let src = self.value(*x);
                let n = S::from_usize_lossy(src.rows());
                let d = src.cols();
                let dx = (0..src.len()).map(|i| g[i % d] / n).collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Mse(pred, target) => {
                let p = self.value(*pred);
                let t = self.value(*target);
                let k = S::lit(2.0) * g[0] / S::from_usize_lossy(p.rows());
                let dp: Vec<S> = p.data().iter().zip(t.data()).map(|(&a, &b)| k * (a - b)).collect();
                if self.requires_grad(*target) {
                    self.accumulate(grads, *target, dp.iter().map(|&v| -v).collect());
                }
                self.accumulate(grads, *pred, dp);
            }
            Op::CrossEntropy { logits, probs, labels } => {
                let k = self.value(*logits).cols();
                let scale = g[0] / S::from_usize_lossy(labels.len());
                let mut dx: Vec<S> = probs.iter().map(|&p| p * scale).collect();
                for (r, &y) in labels.iter().enumerate() {
                    dx[r * k + y] -= scale;
                }
                self.accumulate(grads, *logits, dx);
            }
        }
    }
}

/// Stable in-place softmax of one row.
pub fn softmax_in_place<S: Scalar>(row: &mut [S]) {
    let m = row.iter().copied().fold(S::neg_infinity(), S::max);
    let mut z = S::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        z += *v;
    }
    row.iter_mut().for_each(|v| *v /= z);
}
