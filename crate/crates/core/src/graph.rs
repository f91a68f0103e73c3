//! Reverse-mode autodiff over a define-by-run tape.
//!
//! Each builder method evaluates eagerly, appends a node, and returns a
//! [`NodeId`]. [`Graph::backward`] walks the tape once in reverse creation
//! order, accumulating gradients into a side table. Nodes whose gradient is
//! never touched stay `None`, which keeps unused branches free and makes
//! "exactly zero gradient" a checkable property rather than a numeric
//! accident.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::fmath;
use crate::tensor::{matmul_accumulate, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    /// Input tensor; `requires_grad` distinguishes parameters from constants.
    Leaf { requires_grad: bool },
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    /// `mode` records whether the right operand broadcasts across rows.
    Add(NodeId, NodeId, AddMode),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    MeanAxis(NodeId, usize),
    SumAll(NodeId),
    SoftmaxRows(NodeId),
    Log(NodeId),
    Exp(NodeId),
    Gelu(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        eps: f64,
    },
    GatherRows {
        x: NodeId,
        idx: Vec<usize>,
    },
    GatherCols {
        x: NodeId,
        idx: Vec<usize>,
    },
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    L2NormalizeRows(NodeId),
    /// Rebuilds a full sequence: `src` rows land at `positions`, every other
    /// row is a copy of `fill`.
    ScatterRows {
        src: NodeId,
        fill: NodeId,
        positions: Vec<usize>,
        rows: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum AddMode {
    SameShape,
    /// rhs is rank-1 and is added to every row of the rank-2 lhs.
    RowBroadcast,
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Growable tape of evaluated nodes.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by [`Graph::backward`].
///
/// `None` means the node was never reached by any gradient path — an exact
/// structural zero, distinct from a numerically zero gradient.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads[id.0].take()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Value of a node (always available; evaluation is eager).
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Convenience for scalar-valued nodes.
    pub fn scalar_value(&self, id: NodeId) -> Result<f64> {
        let t = self.value(id);
        if t.numel() != 1 {
            return Err(CoreError::invalid(alloc::format!(
                "expected scalar node, got shape {:?}",
                t.shape()
            )));
        }
        Ok(t.data()[0])
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    /// Differentiable input (a parameter).
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(
            Op::Leaf {
                requires_grad: true,
            },
            value,
        )
    }

    /// Non-differentiable input (data, targets, fixed tables).
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(
            Op::Leaf {
                requires_grad: false,
            },
            value,
        )
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), value))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let value = self.value(a).transpose()?;
        Ok(self.push(Op::Transpose(a), value))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            let data = ta
                .data()
                .iter()
                .zip(tb.data())
                .map(|(x, y)| x + y)
                .collect();
            let value = Tensor::new(ta.shape().to_vec(), data)?;
            return Ok(self.push(Op::Add(a, b, AddMode::SameShape), value));
        }
        if ta.rank() == 2 && tb.rank() == 1 && ta.shape()[1] == tb.shape()[0] {
            let (m, n) = (ta.shape()[0], ta.shape()[1]);
            let mut data = ta.data().to_vec();
            for i in 0..m {
                for j in 0..n {
                    data[i * n + j] += tb.data()[j];
                }
            }
            let value = Tensor::new(vec![m, n], data)?;
            return Ok(self.push(Op::Add(a, b, AddMode::RowBroadcast), value));
        }
        Err(CoreError::ShapeMismatch {
            op: "add",
            lhs: ta.shape().to_vec(),
            rhs: tb.shape().to_vec(),
        })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(CoreError::ShapeMismatch {
                op: "sub",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x - y)
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(Op::Sub(a, b), value))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(CoreError::ShapeMismatch {
                op: "mul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(Op::Mul(a, b), value))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let data = self.value(a).data().iter().map(|x| x * c).collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data).expect("same shape");
        self.push(Op::Scale(a, c), value)
    }

    /// Mean over one axis. For rank-2: axis 0 collapses rows (result `[n]`),
    /// axis 1 collapses columns (result `[m]`). For rank-1 only axis 0 is
    /// valid and yields a scalar.
    pub fn mean_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let t = self.value(a);
        let value = match (t.rank(), axis) {
            (1, 0) => {
                let n = t.shape()[0];
                if n == 0 {
                    return Err(CoreError::invalid("mean over empty axis"));
                }
                Tensor::scalar(t.data().iter().sum::<f64>() / n as f64)
            }
            (2, 0) => {
                let (m, n) = (t.shape()[0], t.shape()[1]);
                if m == 0 {
                    return Err(CoreError::invalid("mean over empty axis"));
                }
                let mut out = vec![0.0; n];
                for i in 0..m {
                    for j in 0..n {
                        out[j] += t.data()[i * n + j];
                    }
                }
                for v in &mut out {
                    *v /= m as f64;
                }
                Tensor::new(vec![n], out)?
            }
            (2, 1) => {
                let (m, n) = (t.shape()[0], t.shape()[1]);
                if n == 0 {
                    return Err(CoreError::invalid("mean over empty axis"));
                }
                let mut out = vec![0.0; m];
                for i in 0..m {
                    out[i] = t.data()[i * n..(i + 1) * n].iter().sum::<f64>() / n as f64;
                }
                Tensor::new(vec![m], out)?
            }
            _ => {
                return Err(CoreError::invalid(alloc::format!(
                    "mean_axis: axis {axis} invalid for shape {:?}",
                    t.shape()
                )))
            }
        };
        Ok(self.push(Op::MeanAxis(a, axis), value))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let value = Tensor::scalar(self.value(a).data().iter().sum());
        self.push(Op::SumAll(a), value)
    }

    /// Row-wise softmax with max-subtraction for stability.
    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let t = self.value(a);
        let (m, n) = t.dims2()?;
        if n == 0 {
            return Err(CoreError::invalid("softmax over empty rows"));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &t.data()[i * n..(i + 1) * n];
            let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let mut denom = 0.0;
            for (o, &x) in out[i * n..(i + 1) * n].iter_mut().zip(row) {
                *o = fmath::exp(x - max);
                denom += *o;
            }
            for o in &mut out[i * n..(i + 1) * n] {
                *o /= denom;
            }
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        Ok(self.push(Op::SoftmaxRows(a), value))
    }

    /// Elementwise natural log; rejects non-positive inputs.
    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        let t = self.value(a);
        if t.data().iter().any(|&x| x <= 0.0) {
            return Err(CoreError::NonFinite("log of non-positive value".into()));
        }
        let data = t.data().iter().map(|&x| fmath::ln(x)).collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.push(Op::Log(a), value))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a);
        let data = t.data().iter().map(|&x| fmath::exp(x)).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push(Op::Exp(a), value)
    }

    /// GELU with the tanh approximation.
    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a);
        let data = t.data().iter().map(|&x| gelu_value(x)).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push(Op::Gelu(a), value)
    }

    /// Row-wise layer normalization with learnable gain and bias.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> Result<NodeId> {
        let t = self.value(x);
        let (m, n) = t.dims2()?;
        let tg = self.value(gain);
        let tb = self.value(bias);
        if tg.shape() != [n] {
            return Err(CoreError::ShapeMismatch {
                op: "layer_norm gain",
                lhs: t.shape().to_vec(),
                rhs: tg.shape().to_vec(),
            });
        }
        if tb.shape() != [n] {
            return Err(CoreError::ShapeMismatch {
                op: "layer_norm bias",
                lhs: t.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &t.data()[i * n..(i + 1) * n];
            let (mu, var) = mean_var(row);
            let inv = 1.0 / fmath::sqrt(var + eps);
            for j in 0..n {
                out[i * n + j] = tg.data()[j] * (row[j] - mu) * inv + tb.data()[j];
            }
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        Ok(self.push(Op::LayerNorm { x, gain, bias, eps }, value))
    }

    pub fn gather_rows(&mut self, x: NodeId, idx: &[usize]) -> Result<NodeId> {
        let t = self.value(x);
        let (m, n) = t.dims2()?;
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            if i >= m {
                return Err(CoreError::invalid(alloc::format!(
                    "gather_rows: index {i} out of range for {m} rows"
                )));
            }
            out.extend_from_slice(&t.data()[i * n..(i + 1) * n]);
        }
        let value = Tensor::new(vec![idx.len(), n], out)?;
        Ok(self.push(
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            value,
        ))
    }

    pub fn gather_cols(&mut self, x: NodeId, idx: &[usize]) -> Result<NodeId> {
        let t = self.value(x);
        let (m, n) = t.dims2()?;
        let mut out = Vec::with_capacity(idx.len() * m);
        for i in 0..m {
            for &j in idx {
                if j >= n {
                    return Err(CoreError::invalid(alloc::format!(
                        "gather_cols: index {j} out of range for {n} cols"
                    )));
                }
                out.push(t.data()[i * n + j]);
            }
        }
        let value = Tensor::new(vec![m, idx.len()], out)?;
        Ok(self.push(
            Op::GatherCols {
                x,
                idx: idx.to_vec(),
            },
            value,
        ))
    }

    /// Stacks inputs vertically. Rank-1 inputs count as a single row.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(CoreError::invalid("concat_rows of zero tensors"));
        }
        let (_, n0) = self.value(parts[0]).dims2()?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            let (m, n) = t.dims2()?;
            if n != n0 {
                return Err(CoreError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.value(parts[0]).shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            rows += m;
            data.extend_from_slice(t.data());
        }
        let value = Tensor::new(vec![rows, n0], data)?;
        Ok(self.push(Op::ConcatRows(parts.to_vec()), value))
    }

    /// Stacks inputs horizontally (equal row counts).
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(CoreError::invalid("concat_cols of zero tensors"));
        }
        let (m0, _) = self.value(parts[0]).dims2()?;
        let mut total_cols = 0;
        for &p in parts {
            let (m, n) = self.value(p).dims2()?;
            if m != m0 {
                return Err(CoreError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.value(parts[0]).shape().to_vec(),
                    rhs: self.value(p).shape().to_vec(),
                });
            }
            total_cols += n;
        }
        let mut data = Vec::with_capacity(m0 * total_cols);
        for i in 0..m0 {
            for &p in parts {
                let t = self.value(p);
                let (_, n) = t.dims2()?;
                data.extend_from_slice(&t.data()[i * n..(i + 1) * n]);
            }
        }
        let value = Tensor::new(vec![m0, total_cols], data)?;
        Ok(self.push(Op::ConcatCols(parts.to_vec()), value))
    }

    /// Normalizes each row to unit L2 norm; a zero-norm row is an error.
    pub fn l2_normalize_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let t = self.value(x);
        let (m, n) = t.dims2()?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &t.data()[i * n..(i + 1) * n];
            let norm = fmath::sqrt(row.iter().map(|v| v * v).sum());
            if norm <= 0.0 {
                return Err(CoreError::invalid(alloc::format!(
                    "l2_normalize_rows: row {i} has zero norm"
                )));
            }
            for j in 0..n {
                out[i * n + j] = row[j] / norm;
            }
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        Ok(self.push(Op::L2NormalizeRows(x), value))
    }

    /// Places `src` rows at `positions` inside a `rows`-long sequence and
    /// fills every other row with `fill` (e.g. a learned mask token).
    pub fn scatter_rows(
        &mut self,
        src: NodeId,
        fill: NodeId,
        positions: &[usize],
        rows: usize,
    ) -> Result<NodeId> {
        let ts = self.value(src);
        let (k, n) = ts.dims2()?;
        if positions.len() != k {
            return Err(CoreError::invalid(alloc::format!(
                "scatter_rows: {k} source rows but {} positions",
                positions.len()
            )));
        }
        let tf = self.value(fill);
        if tf.shape() != [n] {
            return Err(CoreError::ShapeMismatch {
                op: "scatter_rows fill",
                lhs: ts.shape().to_vec(),
                rhs: tf.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; rows * n];
        let mut used = vec![false; rows];
        for (i, &p) in positions.iter().enumerate() {
            if p >= rows {
                return Err(CoreError::invalid(alloc::format!(
                    "scatter_rows: position {p} out of range for {rows} rows"
                )));
            }
            if used[p] {
                return Err(CoreError::invalid(alloc::format!(
                    "scatter_rows: duplicate position {p}"
                )));
            }
            used[p] = true;
            out[p * n..(p + 1) * n].copy_from_slice(&ts.data()[i * n..(i + 1) * n]);
        }
        for (p, &u) in used.iter().enumerate() {
            if !u {
                out[p * n..(p + 1) * n].copy_from_slice(tf.data());
            }
        }
        let value = Tensor::new(vec![rows, n], out)?;
        Ok(self.push(
            Op::ScatterRows {
                src,
                fill,
                positions: positions.to_vec(),
                rows,
            },
            value,
        ))
    }

    /// Reverse-mode sweep from `root`. `seed` is required whenever the root
    /// is not scalar-valued.
    pub fn backward(&self, root: NodeId, seed: Option<Tensor>) -> Result<Gradients> {
        let root_val = self.value(root);
        let seed = match seed {
            Some(s) => {
                if s.shape() != root_val.shape() {
                    return Err(CoreError::ShapeMismatch {
                        op: "backward seed",
                        lhs: root_val.shape().to_vec(),
                        rhs: s.shape().to_vec(),
                    });
                }
                s
            }
            None => {
                if root_val.numel() != 1 {
                    return Err(CoreError::invalid(alloc::format!(
                        "backward from non-scalar root of shape {:?} requires an explicit seed",
                        root_val.shape()
                    )));
                }
                Tensor::scalar(1.0)
            }
        };

        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(seed);

        for i in (0..self.nodes.len()).rev() {
            // A node's gradient is final by the time we reach it: only
            // consumers (which have larger indices) contribute to it.
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf { requires_grad } => {
                    if *requires_grad {
                        grads[i] = Some(g);
                    }
                }
                Op::MatMul(a, b) => {
                    let ta = self.value(*a);
                    let tb = self.value(*b);
                    let (m, k) = ta.dims2()?;
                    let (_, n) = tb.dims2()?;
                    // dA = dC · Bᵀ, dB = Aᵀ · dC
                    let bt = tb.transpose()?;
                    let mut da = vec![0.0; m * k];
                    matmul_accumulate(g.data(), bt.data(), m, n, k, &mut da);
                    let at = ta.transpose()?;
                    let mut db = vec![0.0; k * n];
                    matmul_accumulate(at.data(), g.data(), k, m, n, &mut db);
                    self.accumulate(&mut grads, *a, &da);
                    self.accumulate(&mut grads, *b, &db);
                }
                Op::Transpose(a) => {
                    let gt = g.transpose()?;
                    self.accumulate(&mut grads, *a, gt.data());
                }
                Op::Add(a, b, mode) => {
                    self.accumulate(&mut grads, *a, g.data());
                    match mode {
                        AddMode::SameShape => self.accumulate(&mut grads, *b, g.data()),
                        AddMode::RowBroadcast => {
                            let (m, n) = g.dims2()?;
                            let mut db = vec![0.0; n];
                            for i in 0..m {
                                for j in 0..n {
                                    db[j] += g.data()[i * n + j];
                                }
                            }
                            self.accumulate(&mut grads, *b, &db);
                        }
                    }
                }
                Op::Sub(a, b) => {
                    self.accumulate(&mut grads, *a, g.data());
                    let neg: Vec<f64> = g.data().iter().map(|v| -v).collect();
                    self.accumulate(&mut grads, *b, &neg);
                }
                Op::Mul(a, b) => {
                    let da: Vec<f64> = g
                        .data()
                        .iter()
                        .zip(self.value(*b).data())
                        .map(|(g, y)| g * y)
                        .collect();
                    let db: Vec<f64> = g
                        .data()
                        .iter()
                        .zip(self.value(*a).data())
                        .map(|(g, x)| g * x)
                        .collect();
                    self.accumulate(&mut grads, *a, &da);
                    self.accumulate(&mut grads, *b, &db);
                }
                Op::Scale(a, c) => {
                    let da: Vec<f64> = g.data().iter().map(|v| v * c).collect();
                    self.accumulate(&mut grads, *a, &da);
                }
                Op::MeanAxis(a, axis) => {
                    let t = self.value(*a);
                    let mut da = vec![0.0; t.numel()];
                    match (t.rank(), axis) {
                        (1, 0) => {
                            let n = t.shape()[0];
                            for v in &mut da {
                                *v = g.data()[0] / n as f64;
                            }
                        }
                        (2, 0) => {
                            let (m, n) = (t.shape()[0], t.shape()[1]);
                            for i in 0..m {
                                for j in 0..n {
                                    da[i * n + j] = g.data()[j] / m as f64;
                                }
                            }
                        }
                        (2, 1) => {
                            let (m, n) = (t.shape()[0], t.shape()[1]);
                            for i in 0..m {
                                for j in 0..n {
                                    da[i * n + j] = g.data()[i] / n as f64;
                                }
                            }
                        }
                        _ => unreachable!("validated at construction"),
                    }
                    self.accumulate(&mut grads, *a, &da);
                }
                Op::SumAll(a) => {
                    let da = vec![g.data()[0]; self.value(*a).numel()];
                    self.accumulate(&mut grads, *a, &da);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let (m, n) = y.dims2()?;
                    let mut da = vec![0.0; m * n];
                    for i in 0..m {
                        let yr = &y.data()[i * n..(i + 1) * n];
                        let gr = &g.data()[i * n..(i + 1) * n];
                        let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                        for j in 0..n {
                            da[i * n + j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    self.accumulate(&mut grads, *a, &da);
                }
                Op::Log(a) => {
                    let da: Vec<f64> = g
                        .data()
                        .iter()
                        .zip(self.value(*a).data())
                        .map(|(g, x)| g / x)
                        .collect();
                    self.accumulate(&mut grads, *a, &da);
                }
                Op::Exp(a) => {
                    let da: Vec<f64> = g
                        .data()
                        .iter()
                        .zip(node.value.data())
                        .map(|(g, y)| g * y)
                        .collect();
                    self.accumulate(&mut grads, *a, &da);
                }
                Op::Gelu(a) => {
                    let da: Vec<f64> = g
                        .data()
                        .iter()
                        .zip(self.value(*a).data())
                        .map(|(g, &x)| g * gelu_derivative(x))
                        .collect();
                    self.accumulate(&mut grads, *a, &da);
                }
                Op::LayerNorm { x, gain, bias, eps } => {
                    let t = self.value(*x);
                    let (m, n) = t.dims2()?;
                    let tg = self.value(*gain);
                    let mut dx = vec![0.0; m * n];
                    let mut dgain = vec![0.0; n];
                    let mut dbias = vec![0.0; n];
                    for i in 0..m {
                        let row = &t.data()[i * n..(i + 1) * n];
                        let gr = &g.data()[i * n..(i + 1) * n];
                        let (mu, var) = mean_var(row);
                        let inv = 1.0 / fmath::sqrt(var + eps);
                        // xh = normalized row; dxh = upstream scaled by gain
                        let mut mean_dxh = 0.0;
                        let mut mean_dxh_xh = 0.0;
                        let mut xh = vec![0.0; n];
                        let mut dxh = vec![0.0; n];
                        for j in 0..n {
                            xh[j] = (row[j] - mu) * inv;
                            dxh[j] = gr[j] * tg.data()[j];
                            mean_dxh += dxh[j];
                            mean_dxh_xh += dxh[j] * xh[j];
                            dgain[j] += gr[j] * xh[j];
                            dbias[j] += gr[j];
                        }
                        mean_dxh /= n as f64;
                        mean_dxh_xh /= n as f64;
                        for j in 0..n {
                            dx[i * n + j] = inv * (dxh[j] - mean_dxh - xh[j] * mean_dxh_xh);
                        }
                    }
                    self.accumulate(&mut grads, *x, &dx);
                    self.accumulate(&mut grads, *gain, &dgain);
                    self.accumulate(&mut grads, *bias, &dbias);
                }
                Op::GatherRows { x, idx } => {
                    let t = self.value(*x);
                    let (_, n) = t.dims2()?;
                    let mut dx = vec![0.0; t.numel()];
                    for (out_row, &src_row) in idx.iter().enumerate() {
                        for j in 0..n {
                            dx[src_row * n + j] += g.data()[out_row * n + j];
                        }
                    }
                    self.accumulate(&mut grads, *x, &dx);
                }
                Op::GatherCols { x, idx } => {
                    let t = self.value(*x);
                    let (m, n) = t.dims2()?;
                    let k = idx.len();
                    let mut dx = vec![0.0; t.numel()];
                    for i in 0..m {
                        for (out_col, &src_col) in idx.iter().enumerate() {
                            dx[i * n + src_col] += g.data()[i * k + out_col];
                        }
                    }
                    self.accumulate(&mut grads, *x, &dx);
                }
                Op::ConcatRows(parts) => {
                    let (_, n) = node.value.dims2()?;
                    let mut offset = 0;
                    for &p in parts {
                        let rows = self.value(p).dims2()?.0;
                        let slice = &g.data()[offset * n..(offset + rows) * n];
                        self.accumulate(&mut grads, p, slice);
                        offset += rows;
                    }
                }
                Op::ConcatCols(parts) => {
                    let (m, total) = node.value.dims2()?;
                    let mut offset = 0;
                    for &p in parts {
                        let (_, n) = self.value(p).dims2()?;
                        let mut dp = vec![0.0; m * n];
                        for i in 0..m {
                            dp[i * n..(i + 1) * n].copy_from_slice(
                                &g.data()[i * total + offset..i * total + offset + n],
                            );
                        }
                        self.accumulate(&mut grads, p, &dp);
                        offset += n;
                    }
                }
                Op::L2NormalizeRows(a) => {
                    let t = self.value(*a);
                    let (m, n) = t.dims2()?;
                    let y = &node.value;
                    let mut da = vec![0.0; m * n];
                    for i in 0..m {
                        let row = &t.data()[i * n..(i + 1) * n];
                        let yr = &y.data()[i * n..(i + 1) * n];
                        let gr = &g.data()[i * n..(i + 1) * n];
                        let norm = fmath::sqrt(row.iter().map(|v| v * v).sum());
                        let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                        for j in 0..n {
                            da[i * n + j] = (gr[j] - yr[j] * dot) / norm;
                        }
                    }
                    self.accumulate(&mut grads, *a, &da);
                }
                Op::ScatterRows {
                    src,
                    fill,
                    positions,
                    rows,
                } => {
                    let (k, n) = self.value(*src).dims2()?;
                    let mut dsrc = vec![0.0; k * n];
                    let mut in_src = vec![false; *rows];
                    for (i, &p) in positions.iter().enumerate() {
                        in_src[p] = true;
                        dsrc[i * n..(i + 1) * n].copy_from_slice(&g.data()[p * n..(p + 1) * n]);
                    }
                    let mut dfill = vec![0.0; n];
                    for (p, &hit) in in_src.iter().enumerate() {
                        if !hit {
                            for j in 0..n {
                                dfill[j] += g.data()[p * n + j];
                            }
                        }
                    }
                    self.accumulate(&mut grads, *src, &dsrc);
                    self.accumulate(&mut grads, *fill, &dfill);
                }
            }
        }

        Ok(Gradients { grads })
    }

    /// Adds `flat` into the gradient slot of `id`, allocating zeros on first
    /// touch. Shapes are tracked by the node's value; only element counts
    /// must match (rank-1 vs single-row rank-2 coerce freely).
    fn accumulate(&self, grads: &mut [Option<Tensor>], id: NodeId, flat: &[f64]) {
        let node = &self.nodes[id.0];
        if let Op::Leaf {
            requires_grad: false,
        } = node.op
        {
            return; // constants never need storage
        }
        let slot = &mut grads[id.0];
        let g = slot.get_or_insert_with(|| Tensor::zeros(node.value.shape().to_vec()));
        debug_assert_eq!(g.numel(), flat.len());
        for (dst, src) in g.data_mut().iter_mut().zip(flat) {
            *dst += src;
        }
    }
}

fn mean_var(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mu = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
    (mu, var)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu_value(x: f64) -> f64 {
    0.5 * x * (1.0 + fmath::tanh(GELU_C * (x + GELU_A * x * x * x)))
}

fn gelu_derivative(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = fmath::tanh(u);
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_requires_seed_for_non_scalar_root() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(&[1.0, 2.0]));
        let y = g.scale(x, 2.0);
        assert!(g.backward(y, None).is_err());
        let seeded = g.backward(y, Some(Tensor::vector(&[1.0, 1.0]))).unwrap();
        assert_eq!(seeded.get(x).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let c = g.constant(Tensor::scalar(5.0));
        let y = g.mul(x, c).unwrap();
        let grads = g.backward(y, None).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[5.0]);
        assert!(grads.get(c).is_none());
    }

    #[test]
    fn unused_branch_gradient_is_structurally_absent() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(1.0));
        let unused = g.param(Tensor::scalar(2.0));
        let _dead_end = g.scale(unused, 3.0);
        let y = g.scale(x, 4.0);
        let grads = g.backward(y, None).unwrap();
        assert!(grads.get(unused).is_none());
        assert_eq!(grads.get(x).unwrap().data(), &[4.0]);
    }

    #[test]
    fn reused_node_accumulates_gradient() {
        // y = x * x => dy/dx = 2x through two paths into the same leaf.
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y, None).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn add_broadcast_sums_rows_in_backward() {
        let mut g = Graph::new();
        let x = g.param(Tensor::matrix(2, 3, alloc::vec![0.0; 6]).unwrap());
        let b = g.param(Tensor::vector(&[1.0, 2.0, 3.0]));
        let y = g.add(x, b).unwrap();
        let s = g.sum_all(y);
        let grads = g.backward(s, None).unwrap();
        assert_eq!(grads.get(b).unwrap().data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn log_rejects_non_positive() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(&[1.0, 0.0]));
        assert!(g.log(x).is_err());
    }

    #[test]
    fn scatter_rows_places_fill_everywhere_else() {
        let mut g = Graph::new();
        let src = g.param(Tensor::matrix(2, 2, alloc::vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let fill = g.param(Tensor::vector(&[9.0, 9.0]));
        let y = g.scatter_rows(src, fill, &[0, 3], 4).unwrap();
        assert_eq!(
            g.value(y).data(),
            &[1.0, 2.0, 9.0, 9.0, 9.0, 9.0, 3.0, 4.0]
        );
        let s = g.sum_all(y);
        let grads = g.backward(s, None).unwrap();
        assert_eq!(grads.get(fill).unwrap().data(), &[2.0, 2.0]);
        assert_eq!(grads.get(src).unwrap().data(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::new();
        let x = g.param(Tensor::matrix(2, 3, alloc::vec![1.0, 2.0, 3.0, -1.0, 0.0, 1.0]).unwrap());
        let y = g.softmax_rows(x).unwrap();
        for i in 0..2 {
            let s: f64 = g.value(y).row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn l2_normalize_zero_row_errors_with_row_index() {
        let mut g = Graph::new();
        let x = g.param(Tensor::matrix(2, 2, alloc::vec![1.0, 0.0, 0.0, 0.0]).unwrap());
        let err = g.l2_normalize_rows(x).unwrap_err();
        assert!(alloc::format!("{err}").contains("row 1"));
    }
}
