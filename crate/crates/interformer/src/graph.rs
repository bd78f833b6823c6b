//! Reverse-mode autodiff over a flat operation tape.
//!
//! Ops execute eagerly as they are recorded, so node values are always
//! available during construction. Construction order is the topological
//! order; `backward` walks the tape in exact reverse.

use crate::tensor::{Result, Tensor, TensorError};

/// Handle to a node in a [`Graph`]. Only valid for the graph that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Maximum(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Concat { axis: usize, parts: Vec<NodeId> },
    Narrow { x: NodeId, axis: usize, start: usize },
    ReduceMean { x: NodeId, axis: usize },
    ReduceSum { x: NodeId, axis: usize },
    SumAll(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Sqrt(NodeId),
    Recip(NodeId),
    Neg(NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    Scale { x: NodeId, c: f64 },
    AddScalar { x: NodeId },
    BroadcastTo(NodeId),
    Softmax { x: NodeId, axis: usize },
    GatherRows { x: NodeId, idx: Vec<i64> },
    Reshape(NodeId),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    op: Op,
    requires_grad: bool,
}

/// Operation tape. Single-threaded by construction; do not share across
/// threads while recording.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    /// When set, every op output is scanned for NaN/Inf. Defaults to on in
    /// debug builds.
    pub check_finite: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            check_finite: cfg!(debug_assertions),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Insert a tensor as a leaf; `requires_grad` is taken from the tensor.
    pub fn leaf(&mut self, t: Tensor) -> NodeId {
        let requires_grad = t.requires_grad;
        self.push_node(t, Op::Leaf, requires_grad)
    }

    /// Non-differentiable constant leaf.
    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Result<NodeId> {
        let t = Tensor::new(shape, data)?;
        Ok(self.push_node(t, Op::Leaf, false))
    }

    pub fn scalar_const(&mut self, v: f64) -> Result<NodeId> {
        self.constant(&[1], vec![v])
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn data(&self, id: NodeId) -> &[f64] {
        self.nodes[id.0].value.data()
    }

    /// Accumulated gradient for a node, if any backward pass has reached it.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    /// Gradient with absent treated as exact zeros (outputs independent of a
    /// leaf yield zero for that leaf).
    pub fn grad_or_zeros(&self, id: NodeId) -> Vec<f64> {
        match self.grad(id) {
            Some(g) => g.to_vec(),
            None => vec![0.0; self.nodes[id.0].value.numel()],
        }
    }

    pub fn clear_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push_node(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        id
    }

    fn push_op(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[NodeId]) -> Result<NodeId> {
        if self.check_finite {
            if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
                return Err(TensorError::NonFiniteValue(format!(
                    "{} (value {bad})",
                    op_name(&op)
                )));
            }
        }
        let requires_grad = inputs.iter().any(|&i| self.nodes[i.0].requires_grad);
        Ok(self.push_node(Tensor::from_op(shape, data), op, requires_grad))
    }

    // ── binary elementwise ops (trailing-aligned broadcasting) ──────────

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, |x, y| x + y, "add")
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, |x, y| x - y, "sub")
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, |x, y| x * y, "mul")
    }

    /// Elementwise maximum; ties route gradient to the first operand.
    pub fn maximum(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, |x, y| if x >= y { x } else { y }, "maximum")
    }

    fn binary(
        &mut self,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        name: &str,
    ) -> Result<NodeId> {
        let (asl, bsl) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = broadcast_shape(&asl, &bsl)
            .ok_or_else(|| TensorError::ShapeMismatch(format!("{name} {asl:?} vs {bsl:?}")))?;
        let (ad, bd) = (self.data(a), self.data(b));
        let data = if asl == bsl {
            ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let mut out = vec![0.0; out_shape.iter().product()];
            let bd = self.data(b);
            let ad = self.data(a);
            for_each_broadcast(&out_shape, &asl, &bsl, |o, ia, ib| {
                out[o] = f(ad[ia], bd[ib]);
            });
            out
        };
        let op = match name {
            "add" => Op::Add(a, b),
            "sub" => Op::Sub(a, b),
            "mul" => Op::Mul(a, b),
            "maximum" => Op::Maximum(a, b),
            _ => unreachable!(),
        };
        self.push_op(out_shape, data, op, &[a, b])
    }

    // ── matmul / transpose ───────────────────────────────────────────────

    /// 2-D matrix product `(m×k) @ (k×n)`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (asl, bsl) = (self.shape(a), self.shape(b));
        if asl.len() != 2 || bsl.len() != 2 || asl[1] != bsl[0] {
            return Err(TensorError::ShapeMismatch(format!(
                "matmul {asl:?} @ {bsl:?}"
            )));
        }
        let (m, k, n) = (asl[0], asl[1], bsl[1]);
        let data = matmul_raw(self.data(a), self.data(b), m, k, n);
        self.push_op(vec![m, n], data, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let sh = self.shape(x);
        if sh.len() != 2 {
            return Err(TensorError::ShapeMismatch(format!("transpose rank {sh:?}")));
        }
        let (r, c) = (sh[0], sh[1]);
        let xd = self.data(x);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = xd[i * c + j];
            }
        }
        self.push_op(vec![c, r], out, Op::Transpose(x), &[x])
    }

    // ── shape ops ────────────────────────────────────────────────────────

    pub fn concat(&mut self, axis: usize, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(TensorError::ShapeMismatch("concat of nothing".into()));
        }
        let rank = self.shape(parts[0]).len();
        if axis >= rank {
            return Err(TensorError::AxisOutOfRange { axis, rank });
        }
        let mut out_shape = self.shape(parts[0]).to_vec();
        out_shape[axis] = 0;
        for &p in parts {
            let sh = self.shape(p);
            if sh.len() != rank
                || (0..rank).any(|d| d != axis && sh[d] != out_shape[d] && out_shape[d] != 0)
            {
                return Err(TensorError::ShapeMismatch(format!(
                    "concat axis {axis}: {sh:?} vs {out_shape:?}"
                )));
            }
            out_shape[axis] += sh[axis];
        }
        let numel = out_shape.iter().product();
        let mut out = vec![0.0; numel];
        match (rank, axis) {
            (1, 0) => {
                let mut at = 0;
                for &p in parts {
                    let d = self.data(p);
                    out[at..at + d.len()].copy_from_slice(d);
                    at += d.len();
                }
            }
            (2, 0) => {
                let mut at = 0;
                for &p in parts {
                    let d = self.data(p);
                    out[at..at + d.len()].copy_from_slice(d);
                    at += d.len();
                }
            }
            (2, 1) => {
                let rows = out_shape[0];
                let total_cols = out_shape[1];
                let mut col_at = 0;
                for &p in parts {
                    let cols = self.shape(p)[1];
                    let d = self.data(p);
                    for r in 0..rows {
                        out[r * total_cols + col_at..r * total_cols + col_at + cols]
                            .copy_from_slice(&d[r * cols..(r + 1) * cols]);
                    }
                    col_at += cols;
                }
            }
            _ => {
                return Err(TensorError::ShapeMismatch(format!(
                    "concat unsupported rank {rank} axis {axis}"
                )))
            }
        }
        self.push_op(
            out_shape,
            out,
            Op::Concat {
                axis,
                parts: parts.to_vec(),
            },
            parts,
        )
    }

    /// Contiguous slice `[start, start+len)` along `axis` of a 1-D/2-D tensor.
    pub fn narrow(&mut self, x: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        let sh = self.shape(x).to_vec();
        let rank = sh.len();
        if axis >= rank {
            return Err(TensorError::AxisOutOfRange { axis, rank });
        }
        if start + len > sh[axis] || len == 0 {
            return Err(TensorError::ShapeMismatch(format!(
                "narrow [{start}, {start}+{len}) exceeds extent {} on axis {axis}",
                sh[axis]
            )));
        }
        let xd = self.data(x);
        let (out_shape, out) = match (rank, axis) {
            (1, 0) => (vec![len], xd[start..start + len].to_vec()),
            (2, 0) => (
                vec![len, sh[1]],
                xd[start * sh[1]..(start + len) * sh[1]].to_vec(),
            ),
            (2, 1) => {
                let mut out = Vec::with_capacity(sh[0] * len);
                for r in 0..sh[0] {
                    out.extend_from_slice(&xd[r * sh[1] + start..r * sh[1] + start + len]);
                }
                (vec![sh[0], len], out)
            }
            _ => {
                return Err(TensorError::ShapeMismatch(format!(
                    "narrow unsupported rank {rank} axis {axis}"
                )))
            }
        };
        self.push_op(out_shape, out, Op::Narrow { x, axis, start }, &[x])
    }

    /// Split into `parts` equal slices along `axis`.
    pub fn split(&mut self, x: NodeId, axis: usize, parts: usize) -> Result<Vec<NodeId>> {
        let sh = self.shape(x).to_vec();
        let rank = sh.len();
        if axis >= rank {
            return Err(TensorError::AxisOutOfRange { axis, rank });
        }
        if parts == 0 || sh[axis] % parts != 0 {
            return Err(TensorError::ShapeMismatch(format!(
                "cannot split extent {} into {parts} equal parts",
                sh[axis]
            )));
        }
        let step = sh[axis] / parts;
        (0..parts)
            .map(|p| self.narrow(x, axis, p * step, step))
            .collect()
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).numel() {
            return Err(TensorError::ShapeMismatch(format!(
                "reshape {:?} -> {shape:?}",
                self.shape(x)
            )));
        }
        let data = self.data(x).to_vec();
        self.push_op(shape.to_vec(), data, Op::Reshape(x), &[x])
    }

    /// Materialized broadcast to `shape` under trailing-dimension alignment.
    pub fn broadcast_to(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        let joint = broadcast_shape(&xs, shape)
            .filter(|j| j == shape)
            .ok_or_else(|| {
                TensorError::ShapeMismatch(format!("broadcast {xs:?} -> {shape:?}"))
            })?;
        let xd = self.data(x);
        let mut out = vec![0.0; joint.iter().product()];
        for_each_broadcast(&joint, &xs, &xs, |o, ix, _| out[o] = xd[ix]);
        self.push_op(joint, out, Op::BroadcastTo(x), &[x])
    }

    // ── reductions ───────────────────────────────────────────────────────

    pub fn reduce_mean(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        self.reduce(x, axis, true)
    }

    pub fn reduce_sum(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        self.reduce(x, axis, false)
    }

    fn reduce(&mut self, x: NodeId, axis: usize, mean: bool) -> Result<NodeId> {
        let sh = self.shape(x).to_vec();
        let rank = sh.len();
        if axis >= rank {
            return Err(TensorError::AxisOutOfRange { axis, rank });
        }
        let xd = self.data(x);
        let (out_shape, mut out) = match (rank, axis) {
            (1, 0) => (vec![1], vec![xd.iter().sum::<f64>()]),
            (2, 0) => {
                let (r, c) = (sh[0], sh[1]);
                let mut acc = vec![0.0; c];
                for i in 0..r {
                    for j in 0..c {
                        acc[j] += xd[i * c + j];
                    }
                }
                (vec![c], acc)
            }
            (2, 1) => {
                let (r, c) = (sh[0], sh[1]);
                let mut acc = vec![0.0; r];
                for i in 0..r {
                    acc[i] = xd[i * c..(i + 1) * c].iter().sum();
                }
                (vec![r], acc)
            }
            _ => {
                return Err(TensorError::ShapeMismatch(format!(
                    "reduce unsupported rank {rank}"
                )))
            }
        };
        if mean {
            let n = sh[axis] as f64;
            for v in &mut out {
                *v /= n;
            }
        }
        let op = if mean {
            Op::ReduceMean { x, axis }
        } else {
            Op::ReduceSum { x, axis }
        };
        self.push_op(out_shape, out, op, &[x])
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.data(x).iter().sum::<f64>();
        self.push_op(vec![1], vec![s], Op::SumAll(x), &[x])
    }

    pub fn mean_all(&mut self, x: NodeId) -> Result<NodeId> {
        let n = self.value(x).numel() as f64;
        let s = self.sum_all(x)?;
        self.scale(s, 1.0 / n)
    }

    // ── unary ops ────────────────────────────────────────────────────────

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, f64::ln, Op::Log(x))
    }

    pub fn sqrt(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, f64::sqrt, Op::Sqrt(x))
    }

    pub fn recip(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, |v| 1.0 / v, Op::Recip(x))
    }

    pub fn neg(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, |v| -v, Op::Neg(x))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, |v| if v > 0.0 { v } else { 0.0 }, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, |v| 1.0 / (1.0 + (-v).exp()), Op::Sigmoid(x))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        assert!(c.is_finite(), "scale by non-finite constant");
        self.unary(x, |v| v * c, Op::Scale { x, c })
    }

    pub fn add_scalar(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        assert!(c.is_finite(), "shift by non-finite constant");
        self.unary(x, |v| v + c, Op::AddScalar { x })
    }

    fn unary(&mut self, x: NodeId, f: impl Fn(f64) -> f64, op: Op) -> Result<NodeId> {
        let data = self.data(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push_op(shape, data, op, &[x])
    }

    // ── fused ops ────────────────────────────────────────────────────────

    /// Numerically stabilized softmax along `axis` (lane max subtracted).
    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let sh = self.shape(x).to_vec();
        let rank = sh.len();
        if axis >= rank {
            return Err(TensorError::AxisOutOfRange { axis, rank });
        }
        let xd = self.data(x);
        let mut out = vec![0.0; xd.len()];
        for_each_lane(&sh, axis, |lane| {
            let m = lane
                .iter()
                .map(|&i| xd[i])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for &i in lane {
                out[i] = (xd[i] - m).exp();
                sum += out[i];
            }
            for &i in lane {
                out[i] /= sum;
            }
        });
        self.push_op(sh, out, Op::Softmax { x, axis }, &[x])
    }

    /// Row gather on a 2-D tensor. Index `-1` yields a zero row; gradients
    /// scatter-add back to the selected rows.
    pub fn gather_rows(&mut self, x: NodeId, idx: &[i64]) -> Result<NodeId> {
        let sh = self.shape(x).to_vec();
        if sh.len() != 2 {
            return Err(TensorError::ShapeMismatch(format!(
                "gather_rows on rank {}",
                sh.len()
            )));
        }
        let (rows, cols) = (sh[0] as i64, sh[1]);
        if let Some(&bad) = idx.iter().find(|&&i| i < -1 || i >= rows) {
            return Err(TensorError::ShapeMismatch(format!(
                "gather index {bad} out of range for {rows} rows"
            )));
        }
        let xd = self.data(x);
        let mut out = vec![0.0; idx.len() * cols];
        for (r, &i) in idx.iter().enumerate() {
            if i >= 0 {
                out[r * cols..(r + 1) * cols]
                    .copy_from_slice(&xd[i as usize * cols..(i as usize + 1) * cols]);
            }
        }
        self.push_op(
            vec![idx.len(), cols],
            out,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            &[x],
        )
    }

    // ── backward ─────────────────────────────────────────────────────────

    /// Reverse pass from a scalar output. Leaf gradients accumulate across
    /// repeated calls until [`Graph::clear_grads`].
    pub fn backward(&mut self, out: NodeId) -> Result<()> {
        if self.value(out).numel() != 1 {
            return Err(TensorError::NonScalarOutput(self.shape(out).to_vec()));
        }
        let mut scratch: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        scratch[out.0] = Some(vec![1.0]);
        for id in (0..=out.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = scratch[id].take() else {
                continue;
            };
            self.propagate(id, &g, &mut scratch);
            // keep the local copy for the persistent accumulator
            let node = &mut self.nodes[id];
            match &mut node.grad {
                Some(acc) => {
                    for (a, d) in acc.iter_mut().zip(&g) {
                        *a += d;
                    }
                }
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    fn add_into(scratch: &mut [Option<Vec<f64>>], id: NodeId, numel: usize) -> &mut Vec<f64> {
        scratch[id.0].get_or_insert_with(|| vec![0.0; numel])
    }

    fn propagate(&self, id: usize, g: &[f64], scratch: &mut Vec<Option<Vec<f64>>>) {
        let node = &self.nodes[id];
        let wants = |n: &Self, i: NodeId| n.nodes[i.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                let (asl, bsl) = (self.shape(*a).to_vec(), self.shape(*b).to_vec());
                let out_shape = node.value.shape().to_vec();
                let ga_on = wants(self, *a);
                let gb_on = wants(self, *b);
                if asl == bsl {
                    if ga_on {
                        let ga = Self::add_into(scratch, *a, g.len());
                        for (x, d) in ga.iter_mut().zip(g) {
                            *x += d;
                        }
                    }
                    if gb_on {
                        let gb = Self::add_into(scratch, *b, g.len());
                        for (x, d) in gb.iter_mut().zip(g) {
                            *x += sign * d;
                        }
                    }
                } else {
                    if ga_on {
                        let mut acc = vec![0.0; self.value(*a).numel()];
                        for_each_broadcast(&out_shape, &asl, &bsl, |o, ia, _| acc[ia] += g[o]);
                        let ga = Self::add_into(scratch, *a, acc.len());
                        for (x, d) in ga.iter_mut().zip(&acc) {
                            *x += d;
                        }
                    }
                    if gb_on {
                        let mut acc = vec![0.0; self.value(*b).numel()];
                        for_each_broadcast(&out_shape, &asl, &bsl, |o, _, ib| {
                            acc[ib] += sign * g[o]
                        });
                        let gb = Self::add_into(scratch, *b, acc.len());
                        for (x, d) in gb.iter_mut().zip(&acc) {
                            *x += d;
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                let (asl, bsl) = (self.shape(*a).to_vec(), self.shape(*b).to_vec());
                let out_shape = node.value.shape().to_vec();
                let (ad, bd) = (self.data(*a), self.data(*b));
                if wants(self, *a) {
                    let mut acc = vec![0.0; ad.len()];
                    for_each_broadcast(&out_shape, &asl, &bsl, |o, ia, ib| {
                        acc[ia] += g[o] * bd[ib]
                    });
                    let ga = Self::add_into(scratch, *a, acc.len());
                    for (x, d) in ga.iter_mut().zip(&acc) {
                        *x += d;
                    }
                }
                if wants(self, *b) {
                    let mut acc = vec![0.0; bd.len()];
                    for_each_broadcast(&out_shape, &asl, &bsl, |o, ia, ib| {
                        acc[ib] += g[o] * ad[ia]
                    });
                    let gb = Self::add_into(scratch, *b, acc.len());
                    for (x, d) in gb.iter_mut().zip(&acc) {
                        *x += d;
                    }
                }
            }
            Op::Maximum(a, b) => {
                let (asl, bsl) = (self.shape(*a).to_vec(), self.shape(*b).to_vec());
                let out_shape = node.value.shape().to_vec();
                let (ad, bd) = (self.data(*a), self.data(*b));
                if wants(self, *a) {
                    let mut acc = vec![0.0; ad.len()];
                    for_each_broadcast(&out_shape, &asl, &bsl, |o, ia, ib| {
                        if ad[ia] >= bd[ib] {
                            acc[ia] += g[o];
                        }
                    });
                    let ga = Self::add_into(scratch, *a, acc.len());
                    for (x, d) in ga.iter_mut().zip(&acc) {
                        *x += d;
                    }
                }
                if wants(self, *b) {
                    let mut acc = vec![0.0; bd.len()];
                    for_each_broadcast(&out_shape, &asl, &bsl, |o, ia, ib| {
                        if ad[ia] < bd[ib] {
                            acc[ib] += g[o];
                        }
                    });
                    let gb = Self::add_into(scratch, *b, acc.len());
                    for (x, d) in gb.iter_mut().zip(&acc) {
                        *x += d;
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let (ad, bd) = (self.data(*a), self.data(*b));
                if wants(self, *a) {
                    // gA = g @ B^T
                    let mut acc = vec![0.0; m * k];
                    for i in 0..m {
                        for j in 0..n {
                            let go = g[i * n + j];
                            if go != 0.0 {
                                for p in 0..k {
                                    acc[i * k + p] += go * bd[p * n + j];
                                }
                            }
                        }
                    }
                    let ga = Self::add_into(scratch, *a, acc.len());
                    for (x, d) in ga.iter_mut().zip(&acc) {
                        *x += d;
                    }
                }
                if wants(self, *b) {
                    // gB = A^T @ g
                    let mut acc = vec![0.0; k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let av = ad[i * k + p];
                            if av != 0.0 {
                                for j in 0..n {
                                    acc[p * n + j] += av * g[i * n + j];
                                }
                            }
                        }
                    }
                    let gb = Self::add_into(scratch, *b, acc.len());
                    for (x, d) in gb.iter_mut().zip(&acc) {
                        *x += d;
                    }
                }
            }
            Op::Transpose(x) => {
                let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                let gx = Self::add_into(scratch, *x, r * c);
                for i in 0..r {
                    for j in 0..c {
                        gx[i * c + j] += g[j * r + i];
                    }
                }
            }
            Op::Concat { axis, parts } => {
                let out_shape = node.value.shape().to_vec();
                let mut offset = 0;
                for &p in parts {
                    let psh = self.shape(p).to_vec();
                    let plen = psh[*axis];
                    if wants(self, p) {
                        let gp = Self::add_into(scratch, p, self.value(p).numel());
                        match (psh.len(), *axis) {
                            (1, 0) | (2, 0) => {
                                let width = psh.get(1).copied().unwrap_or(1);
                                let flat_start = offset * width;
                                for (i, x) in gp.iter_mut().enumerate() {
                                    *x += g[flat_start + i];
                                }
                            }
                            (2, 1) => {
                                let rows = psh[0];
                                let cols = psh[1];
                                let total = out_shape[1];
                                for r in 0..rows {
                                    for cidx in 0..cols {
                                        gp[r * cols + cidx] += g[r * total + offset + cidx];
                                    }
                                }
                            }
                            _ => unreachable!(),
                        }
                    }
                    offset += plen;
                }
            }
            Op::Narrow { x, axis, start } => {
                let xsh = self.shape(*x).to_vec();
                let osh = node.value.shape().to_vec();
                let gx = Self::add_into(scratch, *x, xsh.iter().product());
                match (xsh.len(), *axis) {
                    (1, 0) => {
                        for (i, d) in g.iter().enumerate() {
                            gx[start + i] += d;
                        }
                    }
                    (2, 0) => {
                        let cols = xsh[1];
                        for (i, d) in g.iter().enumerate() {
                            gx[start * cols + i] += d;
                        }
                    }
                    (2, 1) => {
                        let cols = xsh[1];
                        let len = osh[1];
                        for r in 0..osh[0] {
                            for cidx in 0..len {
                                gx[r * cols + start + cidx] += g[r * len + cidx];
                            }
                        }
                    }
                    _ => unreachable!(),
                }
            }
            Op::ReduceMean { x, axis } | Op::ReduceSum { x, axis } => {
                let xsh = self.shape(*x).to_vec();
                let scale = if matches!(node.op, Op::ReduceMean { .. }) {
                    1.0 / xsh[*axis] as f64
                } else {
                    1.0
                };
                let gx = Self::add_into(scratch, *x, xsh.iter().product());
                match (xsh.len(), *axis) {
                    (1, 0) => {
                        for v in gx.iter_mut() {
                            *v += g[0] * scale;
                        }
                    }
                    (2, 0) => {
                        let (r, c) = (xsh[0], xsh[1]);
                        for i in 0..r {
                            for j in 0..c {
                                gx[i * c + j] += g[j] * scale;
                            }
                        }
                    }
                    (2, 1) => {
                        let (r, c) = (xsh[0], xsh[1]);
                        for i in 0..r {
                            for j in 0..c {
                                gx[i * c + j] += g[i] * scale;
                            }
                        }
                    }
                    _ => unreachable!(),
                }
            }
            Op::SumAll(x) => {
                let gx = Self::add_into(scratch, *x, self.value(*x).numel());
                for v in gx.iter_mut() {
                    *v += g[0];
                }
            }
            Op::Exp(x) => self.unary_backward(*x, g, scratch, |_, y| y, &node.value),
            Op::Log(x) => {
                let xd = self.data(*x);
                let gx = Self::add_into(scratch, *x, xd.len());
                for (i, d) in g.iter().enumerate() {
                    gx[i] += d / xd[i];
                }
            }
            Op::Sqrt(x) => self.unary_backward(*x, g, scratch, |_, y| 0.5 / y, &node.value),
            Op::Recip(x) => self.unary_backward(*x, g, scratch, |_, y| -(y * y), &node.value),
            Op::Neg(x) => {
                let gx = Self::add_into(scratch, *x, g.len());
                for (x_, d) in gx.iter_mut().zip(g) {
                    *x_ -= d;
                }
            }
            Op::Relu(x) => {
                let xd = self.data(*x);
                let gx = Self::add_into(scratch, *x, xd.len());
                for (i, d) in g.iter().enumerate() {
                    if xd[i] > 0.0 {
                        gx[i] += d;
                    }
                }
            }
            Op::Sigmoid(x) => {
                self.unary_backward(*x, g, scratch, |_, y| y * (1.0 - y), &node.value)
            }
            Op::Scale { x, c } => {
                let gx = Self::add_into(scratch, *x, g.len());
                for (x_, d) in gx.iter_mut().zip(g) {
                    *x_ += c * d;
                }
            }
            Op::AddScalar { x } => {
                let gx = Self::add_into(scratch, *x, g.len());
                for (x_, d) in gx.iter_mut().zip(g) {
                    *x_ += d;
                }
            }
            Op::BroadcastTo(x) => {
                let xs = self.shape(*x).to_vec();
                let out_shape = node.value.shape().to_vec();
                let mut acc = vec![0.0; self.value(*x).numel()];
                for_each_broadcast(&out_shape, &xs, &xs, |o, ix, _| acc[ix] += g[o]);
                let gx = Self::add_into(scratch, *x, acc.len());
                for (x_, d) in gx.iter_mut().zip(&acc) {
                    *x_ += d;
                }
            }
            Op::Softmax { x, axis } => {
                let sh = node.value.shape().to_vec();
                let y = node.value.data();
                let mut acc = vec![0.0; y.len()];
                for_each_lane(&sh, *axis, |lane| {
                    let dot: f64 = lane.iter().map(|&i| g[i] * y[i]).sum();
                    for &i in lane {
                        acc[i] = y[i] * (g[i] - dot);
                    }
                });
                let gx = Self::add_into(scratch, *x, acc.len());
                for (x_, d) in gx.iter_mut().zip(&acc) {
                    *x_ += d;
                }
            }
            Op::GatherRows { x, idx } => {
                let cols = self.shape(*x)[1];
                let gx = Self::add_into(scratch, *x, self.value(*x).numel());
                for (r, &i) in idx.iter().enumerate() {
                    if i >= 0 {
                        let at = i as usize * cols;
                        for c in 0..cols {
                            gx[at + c] += g[r * cols + c];
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                let gx = Self::add_into(scratch, *x, g.len());
                for (x_, d) in gx.iter_mut().zip(g) {
                    *x_ += d;
                }
            }
        }
    }

    fn unary_backward(
        &self,
        x: NodeId,
        g: &[f64],
        scratch: &mut [Option<Vec<f64>>],
        dfdy: impl Fn(f64, f64) -> f64,
        out: &Tensor,
    ) {
        let xd = self.data(x);
        let yd = out.data();
        let gx = Self::add_into(scratch, x, xd.len());
        for i in 0..xd.len() {
            gx[i] += g[i] * dfdy(xd[i], yd[i]);
        }
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Maximum(..) => "maximum",
        Op::MatMul(..) => "matmul",
        Op::Transpose(..) => "transpose",
        Op::Concat { .. } => "concat",
        Op::Narrow { .. } => "narrow",
        Op::ReduceMean { .. } => "reduce_mean",
        Op::ReduceSum { .. } => "reduce_sum",
        Op::SumAll(..) => "sum_all",
        Op::Exp(..) => "exp",
        Op::Log(..) => "log",
        Op::Sqrt(..) => "sqrt",
        Op::Recip(..) => "recip",
        Op::Neg(..) => "neg",
        Op::Relu(..) => "relu",
        Op::Sigmoid(..) => "sigmoid",
        Op::Scale { .. } => "scale",
        Op::AddScalar { .. } => "add_scalar",
        Op::BroadcastTo(..) => "broadcast_to",
        Op::Softmax { .. } => "softmax",
        Op::GatherRows { .. } => "gather_rows",
        Op::Reshape(..) => "reshape",
    }
}

/// Raw `(m×k) @ (k×n)` used by the forward pass.
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av != 0.0 {
                let brow = &b[p * n..(p + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }
    out
}

/// Joint shape under trailing-dimension alignment, or None if incompatible.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        if da != db && da != 1 && db != 1 {
            return None;
        }
        out[i] = da.max(db);
    }
    Some(out)
}

/// Visit every output index of a broadcast op along with the flat indices
/// into both (trailing-aligned) operands.
fn for_each_broadcast(
    out_shape: &[usize],
    a_shape: &[usize],
    b_shape: &[usize],
    mut visit: impl FnMut(usize, usize, usize),
) {
    let rank = out_shape.len();
    let pad = |s: &[usize]| -> Vec<usize> {
        let mut p = vec![1; rank];
        p[rank - s.len()..].copy_from_slice(s);
        p
    };
    let (ap, bp) = (pad(a_shape), pad(b_shape));
    let strides = |p: &[usize]| -> Vec<usize> {
        let mut st = vec![0; rank];
        let mut acc = 1;
        for d in (0..rank).rev() {
            st[d] = if p[d] == 1 { 0 } else { acc };
            acc *= p[d];
        }
        st
    };
    let (ast, bst) = (strides(&ap), strides(&bp));
    let numel: usize = out_shape.iter().product();
    let mut coords = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    for o in 0..numel {
        visit(o, ia, ib);
        // odometer increment
        for d in (0..rank).rev() {
            coords[d] += 1;
            ia += ast[d];
            ib += bst[d];
            if coords[d] < out_shape[d] {
                break;
            }
            ia -= ast[d] * out_shape[d];
            ib -= bst[d] * out_shape[d];
            coords[d] = 0;
        }
    }
}

/// Visit each reduction lane along `axis`: the closure receives the flat
/// indices making up one lane.
fn for_each_lane(shape: &[usize], axis: usize, mut visit: impl FnMut(&[usize])) {
    match (shape.len(), axis) {
        (1, 0) => {
            let lane: Vec<usize> = (0..shape[0]).collect();
            visit(&lane);
        }
        (2, 0) => {
            let (r, c) = (shape[0], shape[1]);
            let mut lane = vec![0usize; r];
            for j in 0..c {
                for (i, slot) in lane.iter_mut().enumerate() {
                    *slot = i * c + j;
                }
                visit(&lane);
            }
        }
        (2, 1) => {
            let (r, c) = (shape[0], shape[1]);
            let mut lane = vec![0usize; c];
            for i in 0..r {
                for (j, slot) in lane.iter_mut().enumerate() {
                    *slot = i * c + j;
                }
                visit(&lane);
            }
        }
        _ => panic!("lane walk unsupported for shape {shape:?} axis {axis}"),
    }
}
