//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] is rebuilt for every training iteration. Each op computes its
//! value immediately; it is recorded on the tape only when at least one input
//! requires a gradient. Values that depend solely on constants (inputs,
//! frozen parameters) are therefore never recorded and cost nothing in the
//! backward pass.
//!
//! [`Graph::frozen_boundary`] cuts the tape explicitly: the returned node
//! carries the same value but no gradient ever flows through it.

mod kernels;

use std::collections::BTreeMap;

pub use kernels::GeluKind;
use kernels::Layout;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    /// Value computed from inputs none of which require a gradient.
    Constant,
    MatMul { a: NodeId, b: NodeId, m: usize, k: usize, n: usize },
    BatchMatMul { a: NodeId, b: NodeId, batch: usize, m: usize, k: usize, n: usize },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { a: NodeId, factor: f64 },
    AddBias { x: NodeId, bias: NodeId },
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, xhat: Vec<f64>, rstd: Vec<f64> },
    Softmax { x: NodeId },
    Gelu { x: NodeId, kind: GeluKind },
    Reshape { x: NodeId },
    Permute { x: NodeId, axes: Vec<usize> },
    Upsample2x { x: NodeId, kernel: NodeId, planes: usize, c: usize, h: usize, w: usize },
    AvgPool2x { x: NodeId, planes: usize, h: usize, w: usize },
    MergeTokens { visible: NodeId, mask_token: NodeId, source: Vec<Option<usize>> },
    WeightedSqError { pred: NodeId, target: Tensor, weights: Vec<f64> },
    Sum { x: NodeId },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    frozen_boundary: bool,
}

/// Operation recorder. One graph per training step, single-threaded.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of the loss with respect to every reachable trainable leaf.
#[derive(Debug, Default)]
pub struct Gradients {
    map: BTreeMap<NodeId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.map.get(&id)
    }

    pub fn remove(&mut self, id: NodeId) -> Option<Tensor> {
        self.map.remove(&id)
    }

    pub fn contains(&self, id: NodeId) -> bool {
        self.map.contains_key(&id)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, &Tensor)> {
        self.map.iter().map(|(k, v)| (*k, v))
    }
}

fn shape_err(op: &str, a: &[usize], b: &[usize]) -> Error {
    Error::dim(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: Vec<f64>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Total node count, including leaves and constants.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of recorded ops, i.e. entries the backward pass will visit.
    pub fn tape_len(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| n.requires_grad && !matches!(n.op, Op::Leaf))
            .count()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn is_frozen_boundary(&self, id: NodeId) -> bool {
        self.nodes[id.0].frozen_boundary
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    /// Same value as `x`, but gradients stop here.
    pub fn frozen_boundary(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).clone();
        let id = self.push(value, Op::Leaf, false);
        self.nodes[id.0].frozen_boundary = true;
        id
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            frozen_boundary: false,
        });
        id
    }

    /// Records `op` if any input needs a gradient, otherwise stores a constant.
    fn record(&mut self, value: Tensor, inputs: &[NodeId], op: Op) -> NodeId {
        if cfg!(debug_assertions) && inputs.iter().all(|&i| self.value(i).is_finite()) {
            debug_assert!(value.is_finite(), "op {op:?} produced non-finite output");
        }
        let requires_grad = inputs.iter().any(|&i| self.nodes[i.0].requires_grad);
        let op = if requires_grad { op } else { Op::Constant };
        self.push(value, op, requires_grad)
    }

    /// `a[..., k] · b[k, n]`; leading axes of `a` are flattened into rows.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() < 2 || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(shape_err("matmul", sa, sb));
        }
        let k = sb[0];
        let n = sb[1];
        let m = self.value(a).numel() / k;
        let mut out_shape = sa[..sa.len() - 1].to_vec();
        out_shape.push(n);
        let mut c = vec![0.0; m * n];
        kernels::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            Layout::normal(k),
            self.value(b).data(),
            Layout::normal(n),
            0.0,
            &mut c,
        );
        let value = Tensor::new(out_shape, c)?;
        Ok(self.record(value, &[a, b], Op::MatMul { a, b, m, k, n }))
    }

    /// Batched product `a[..., m, k] · b[..., k, n]` with equal leading axes.
    pub fn bmm(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        let r = sa.len();
        if r < 3 || sb.len() != r || sa[..r - 2] != sb[..r - 2] || sa[r - 1] != sb[r - 2] {
            return Err(shape_err("bmm", sa, sb));
        }
        let (m, k, n) = (sa[r - 2], sa[r - 1], sb[r - 1]);
        let batch: usize = sa[..r - 2].iter().product();
        let mut out_shape = sa[..r - 1].to_vec();
        out_shape.push(n);
        let mut c = vec![0.0; batch * m * n];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for i in 0..batch {
            kernels::gemm(
                m,
                k,
                n,
                &da[i * m * k..],
                Layout::normal(k),
                &db[i * k * n..],
                Layout::normal(n),
                0.0,
                &mut c[i * m * n..],
            );
        }
        let value = Tensor::new(out_shape, c)?;
        Ok(self.record(value, &[a, b], Op::BatchMatMul { a, b, batch, m, k, n }))
    }

    fn zip_same(&mut self, a: NodeId, b: NodeId, name: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(name, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape(), data)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.zip_same(a, b, "add", |x, y| x + y)?;
        Ok(self.record(v, &[a, b], Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.zip_same(a, b, "sub", |x, y| x - y)?;
        Ok(self.record(v, &[a, b], Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.zip_same(a, b, "mul", |x, y| x * y)?;
        Ok(self.record(v, &[a, b], Op::Mul { a, b }))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let t = self.value(a);
        let v = Tensor::from_fn(t.shape(), |i| t.data()[i] * factor);
        self.record(v, &[a], Op::Scale { a, factor })
    }

    /// `x[..., n] + bias[n]`, broadcasting over leading axes.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let n = tb.numel();
        if tb.rank() != 1 || tx.last_dim() != n || tx.rank() == 0 {
            return Err(shape_err("add_bias", tx.shape(), tb.shape()));
        }
        let b = tb.data();
        let v = Tensor::from_fn(tx.shape(), |i| tx.data()[i] + b[i % n]);
        Ok(self.record(v, &[x, bias], Op::AddBias { x, bias }))
    }

    /// Normalizes the last axis to zero mean and unit variance, then applies
    /// `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        if eps <= 0.0 {
            return Err(Error::contract(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let d = tx.last_dim();
        if tx.rank() == 0 || tg.shape() != [d] || tb.shape() != [d] {
            return Err(Error::dim(format!(
                "layer_norm: input {:?} with gamma {:?} and beta {:?}",
                tx.shape(),
                tg.shape(),
                tb.shape()
            )));
        }
        let (y, xhat, rstd) = kernels::layer_norm(tx.data(), d, tg.data(), tb.data(), eps);
        let v = Tensor::new(tx.shape(), y)?;
        Ok(self.record(v, &[x, gamma, beta], Op::LayerNorm { x, gamma, beta, xhat, rstd }))
    }

    pub fn softmax_last(&mut self, x: NodeId) -> NodeId {
        let t = self.value(x);
        let v = Tensor::new(t.shape(), kernels::softmax_rows(t.data(), t.last_dim()))
            .expect("softmax preserves shape");
        self.record(v, &[x], Op::Softmax { x })
    }

    pub fn gelu(&mut self, x: NodeId, kind: GeluKind) -> NodeId {
        let t = self.value(x);
        let v = Tensor::from_fn(t.shape(), |i| kernels::gelu(t.data()[i], kind));
        self.record(v, &[x], Op::Gelu { x, kind })
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.value(x).clone().reshaped(shape)?;
        Ok(self.record(v, &[x], Op::Reshape { x }))
    }

    /// Output axis `j` is input axis `axes[j]`.
    pub fn permute(&mut self, x: NodeId, axes: &[usize]) -> Result<NodeId> {
        let t = self.value(x);
        let mut seen = axes.to_vec();
        seen.sort_unstable();
        if axes.len() != t.rank() || seen.iter().enumerate().any(|(i, &a)| i != a) {
            return Err(Error::dim(format!(
                "permute: axes {axes:?} do not reorder shape {:?}",
                t.shape()
            )));
        }
        let (data, shape) = kernels::permute(t.data(), t.shape(), axes);
        let v = Tensor::new(shape, data)?;
        Ok(self.record(v, &[x], Op::Permute { x, axes: axes.to_vec() }))
    }

    /// Learnable depthwise 2×2 stride-2 transposed convolution:
    /// `x[..., c, h, w]` with `kernel[c, 2, 2]` gives `[..., c, 2h, 2w]`.
    pub fn upsample2x(&mut self, x: NodeId, kernel: NodeId) -> Result<NodeId> {
        let (tx, tk) = (self.value(x), self.value(kernel));
        let r = tx.rank();
        if r < 3 || tk.shape() != [tx.shape()[r - 3], 2, 2] {
            return Err(shape_err("upsample2x", tx.shape(), tk.shape()));
        }
        let (c, h, w) = (tx.shape()[r - 3], tx.shape()[r - 2], tx.shape()[r - 1]);
        let planes = tx.numel() / (c * h * w);
        let data = kernels::upsample2x(tx.data(), planes, c, h, w, tk.data());
        let mut shape = tx.shape().to_vec();
        shape[r - 2] = 2 * h;
        shape[r - 1] = 2 * w;
        let v = Tensor::new(shape, data)?;
        Ok(self.record(v, &[x, kernel], Op::Upsample2x { x, kernel, planes, c, h, w }))
    }

    /// Fixed 2×2 mean over the trailing two axes; both must be even.
    pub fn avgpool2x(&mut self, x: NodeId) -> Result<NodeId> {
        let t = self.value(x);
        let r = t.rank();
        if r < 2 || !t.shape()[r - 2].is_multiple_of(2) || !t.shape()[r - 1].is_multiple_of(2) {
            return Err(Error::dim(format!(
                "avgpool2x needs even trailing dims, got {:?}",
                t.shape()
            )));
        }
        let (h, w) = (t.shape()[r - 2], t.shape()[r - 1]);
        let planes = t.numel() / (h * w);
        let data = kernels::avgpool2x(t.data(), planes, h, w);
        let mut shape = t.shape().to_vec();
        shape[r - 2] = h / 2;
        shape[r - 1] = w / 2;
        let v = Tensor::new(shape, data)?;
        Ok(self.record(v, &[x], Op::AvgPool2x { x, planes, h, w }))
    }

    /// Scatters `visible[b, v, d]` into a `[b, n, d]` grid; `visible_positions[b][v]`
    /// is the grid slot of row `v`. Every other slot receives `mask_token[d]`.
    pub fn merge_tokens(
        &mut self,
        visible: NodeId,
        mask_token: NodeId,
        visible_positions: &[Vec<usize>],
        n: usize,
    ) -> Result<NodeId> {
        let (tv, tm) = (self.value(visible), self.value(mask_token));
        if tv.rank() != 3 || tm.shape() != [tv.shape()[2]] || tv.shape()[0] != visible_positions.len() {
            return Err(shape_err("merge_tokens", tv.shape(), tm.shape()));
        }
        let (b, v, d) = (tv.shape()[0], tv.shape()[1], tv.shape()[2]);
        let mut source = vec![None; b * n];
        for (bi, pos) in visible_positions.iter().enumerate() {
            if pos.len() != v {
                return Err(Error::dim(format!(
                    "merge_tokens: {} positions for {v} visible rows",
                    pos.len()
                )));
            }
            for (row, &p) in pos.iter().enumerate() {
                if p >= n || source[bi * n + p].is_some() {
                    return Err(Error::contract(format!("merge_tokens: bad position {p}")));
                }
                source[bi * n + p] = Some(bi * v + row);
            }
        }
        let mut data = Vec::with_capacity(b * n * d);
        for s in &source {
            match s {
                Some(r) => data.extend_from_slice(&tv.data()[r * d..(r + 1) * d]),
                None => data.extend_from_slice(tm.data()),
            }
        }
        let value = Tensor::new([b, n, d], data)?;
        Ok(self.record(value, &[visible, mask_token], Op::MergeTokens { visible, mask_token, source }))
    }

    /// `½ Σ_r weights[r] · ‖pred[r] − target[r]‖²` over rows of a `[rows, f]`
    /// prediction; `target` and `weights` are constants.
    pub fn weighted_sq_error(&mut self, pred: NodeId, target: Tensor, weights: Vec<f64>) -> Result<NodeId> {
        let tp = self.value(pred);
        if tp.shape() != target.shape() || tp.rank() != 2 || weights.len() != tp.shape()[0] {
            return Err(shape_err("weighted_sq_error", tp.shape(), target.shape()));
        }
        let f = tp.shape()[1];
        let mut total = 0.0;
        for (r, w) in weights.iter().enumerate() {
            if *w == 0.0 {
                continue;
            }
            let sq: f64 = tp.data()[r * f..(r + 1) * f]
                .iter()
                .zip(&target.data()[r * f..(r + 1) * f])
                .map(|(p, y)| (p - y) * (p - y))
                .sum();
            total += w * sq;
        }
        let v = Tensor::scalar(0.5 * total);
        Ok(self.record(v, &[pred], Op::WeightedSqError { pred, target, weights }))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(x).data().iter().sum());
        self.record(v, &[x], Op::Sum { x })
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Convenience: `x · w + b` for `x[..., in]`, `w[in, out]`, `b[out]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    /// Reverse pass from a one-element `loss`. Returns gradients for every
    /// trainable leaf reachable without crossing a frozen boundary.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        let mut out = Gradients::default();
        if !self.nodes[loss.0].requires_grad {
            return Ok(out);
        }
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                out.map.insert(NodeId(i), Tensor::new(node.value.shape(), g)?);
                continue;
            }
            self.propagate(node, g, &mut grads);
        }
        Ok(out)
    }

    fn propagate(&self, node: &Node, g: Vec<f64>, grads: &mut [Option<Vec<f64>>]) {
        let wants = |id: NodeId| self.nodes[id.0].requires_grad;
        let val = |id: NodeId| self.nodes[id.0].value.data();
        match &node.op {
            Op::Leaf | Op::Constant => {}
            &Op::MatMul { a, b, m, k, n } => {
                if wants(a) {
                    let mut da = vec![0.0; m * k];
                    kernels::gemm(m, n, k, &g, Layout::normal(n), val(b), Layout::transposed(n), 0.0, &mut da);
                    accumulate(&mut grads[a.0], da);
                }
                if wants(b) {
                    let mut db = vec![0.0; k * n];
                    kernels::gemm(k, m, n, val(a), Layout::transposed(k), &g, Layout::normal(n), 0.0, &mut db);
                    accumulate(&mut grads[b.0], db);
                }
            }
            &Op::BatchMatMul { a, b, batch, m, k, n } => {
                if wants(a) {
                    let mut da = vec![0.0; batch * m * k];
                    for i in 0..batch {
                        kernels::gemm(
                            m,
                            n,
                            k,
                            &g[i * m * n..],
                            Layout::normal(n),
                            &val(b)[i * k * n..],
                            Layout::transposed(n),
                            0.0,
                            &mut da[i * m * k..],
                        );
                    }
                    accumulate(&mut grads[a.0], da);
                }
                if wants(b) {
                    let mut db = vec![0.0; batch * k * n];
                    for i in 0..batch {
                        kernels::gemm(
                            k,
                            m,
                            n,
                            &val(a)[i * m * k..],
                            Layout::transposed(k),
                            &g[i * m * n..],
                            Layout::normal(n),
                            0.0,
                            &mut db[i * k * n..],
                        );
                    }
                    accumulate(&mut grads[b.0], db);
                }
            }
            &Op::Add { a, b } => {
                if wants(a) {
                    accumulate(&mut grads[a.0], g.clone());
                }
                if wants(b) {
                    accumulate(&mut grads[b.0], g);
                }
            }
            &Op::Sub { a, b } => {
                if wants(a) {
                    accumulate(&mut grads[a.0], g.clone());
                }
                if wants(b) {
                    accumulate(&mut grads[b.0], g.iter().map(|v| -v).collect());
                }
            }
            &Op::Mul { a, b } => {
                if wants(a) {
                    accumulate(&mut grads[a.0], g.iter().zip(val(b)).map(|(x, y)| x * y).collect());
                }
                if wants(b) {
                    accumulate(&mut grads[b.0], g.iter().zip(val(a)).map(|(x, y)| x * y).collect());
                }
            }
            &Op::Scale { a, factor } => {
                accumulate(&mut grads[a.0], g.iter().map(|v| v * factor).collect());
            }
            &Op::AddBias { x, bias } => {
                if wants(bias) {
                    let n = self.nodes[bias.0].value.numel();
                    let mut db = vec![0.0; n];
                    for row in g.chunks_exact(n) {
                        db.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                    accumulate(&mut grads[bias.0], db);
                }
                if wants(x) {
                    accumulate(&mut grads[x.0], g);
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let d = self.nodes[gamma.0].value.numel();
                let (dx, dg, db) = kernels::layer_norm_backward(&g, xhat, rstd, val(*gamma), d);
                if wants(*x) {
                    accumulate(&mut grads[x.0], dx);
                }
                if wants(*gamma) {
                    accumulate(&mut grads[gamma.0], dg);
                }
                if wants(*beta) {
                    accumulate(&mut grads[beta.0], db);
                }
            }
            &Op::Softmax { x } => {
                let d = node.value.last_dim();
                accumulate(&mut grads[x.0], kernels::softmax_rows_backward(node.value.data(), &g, d));
            }
            &Op::Gelu { x, kind } => {
                let dx = g
                    .iter()
                    .zip(val(x))
                    .map(|(gi, &xi)| gi * kernels::gelu_grad(xi, kind))
                    .collect();
                accumulate(&mut grads[x.0], dx);
            }
            &Op::Reshape { x } => accumulate(&mut grads[x.0], g),
            Op::Permute { x, axes } => {
                let (dx, _) = kernels::permute(&g, node.value.shape(), &kernels::inverse_axes(axes));
                accumulate(&mut grads[x.0], dx);
            }
            &Op::Upsample2x { x, kernel, planes, c, h, w } => {
                let (dx, dk) = kernels::upsample2x_backward(&g, val(x), planes, c, h, w, val(kernel));
                if wants(x) {
                    accumulate(&mut grads[x.0], dx);
                }
                if wants(kernel) {
                    accumulate(&mut grads[kernel.0], dk);
                }
            }
            &Op::AvgPool2x { x, planes, h, w } => {
                accumulate(&mut grads[x.0], kernels::avgpool2x_backward(&g, planes, h, w));
            }
            Op::MergeTokens { visible, mask_token, source } => {
                let d = self.nodes[mask_token.0].value.numel();
                let mut dv = vec![0.0; self.nodes[visible.0].value.numel()];
                let mut dm = vec![0.0; d];
                for (slot, s) in source.iter().enumerate() {
                    let gs = &g[slot * d..(slot + 1) * d];
                    match s {
                        Some(r) => dv[r * d..(r + 1) * d].copy_from_slice(gs),
                        None => dm.iter_mut().zip(gs).for_each(|(a, b)| *a += b),
                    }
                }
                if wants(*visible) {
                    accumulate(&mut grads[visible.0], dv);
                }
                if wants(*mask_token) {
                    accumulate(&mut grads[mask_token.0], dm);
                }
            }
            Op::WeightedSqError { pred, target, weights } => {
                let p = val(*pred);
                let f = target.last_dim();
                let scale = g[0];
                let mut dp = vec![0.0; p.len()];
                for (r, w) in weights.iter().enumerate() {
                    if *w == 0.0 {
                        continue;
                    }
                    for j in r * f..(r + 1) * f {
                        dp[j] = scale * w * (p[j] - target.data()[j]);
                    }
                }
                accumulate(&mut grads[pred.0], dp);
            }
            &Op::Sum { x } => {
                let n = self.nodes[x.0].value.numel();
                accumulate(&mut grads[x.0], vec![g[0]; n]);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_projector() {
        let mut g = Graph::new();
        let i2 = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let c = g.matmul(i2, m).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);

        let p = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 0.0]));
        let b = g.constant(t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
        let c = g.matmul(p, b).unwrap();
        assert_eq!(g.value(c).data(), &[5.0, 6.0, 0.0, 0.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros([2, 3]));
        let b = g.constant(Tensor::zeros([2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full([4], 3.0));
        let gamma = g.constant(Tensor::ones([4]));
        let beta = g.constant(Tensor::zeros([4]));
        let y = g.layer_norm(x, gamma, beta, 1e-5).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_norm_already_normalized() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2], &[1.0, -1.0]));
        let gamma = g.constant(Tensor::ones([2]));
        let beta = g.constant(Tensor::zeros([2]));
        let y = g.layer_norm(x, gamma, beta, 1e-15).unwrap();
        let d = g.value(y).data();
        assert!((d[0] - 1.0).abs() < 1e-12 && (d[1] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_gamma_mismatch() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros([2, 4]));
        let gamma = g.constant(Tensor::ones([3]));
        let beta = g.constant(Tensor::zeros([4]));
        assert!(matches!(g.layer_norm(x, gamma, beta, 1e-5), Err(Error::Dimension(_))));
    }

    #[test]
    fn softmax_symmetric_and_saturated() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros([3]));
        let y = g.softmax_last(x);
        for v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = g.constant(t(&[3], &[1000.0, 0.0, 0.0]));
        let y = g.softmax_last(x);
        let d = g.value(y).data();
        assert!((d[0] - 1.0).abs() < 1e-12 && d[1] < 1e-12 && d[2] < 1e-12);
    }

    #[test]
    fn gelu_asymptotes() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3], &[0.0, 20.0, -20.0]));
        for kind in [GeluKind::Tanh, GeluKind::Erf] {
            let y = g.gelu(x, kind);
            let d = g.value(y).data();
            assert_eq!(d[0], 0.0);
            assert!((d[1] - 20.0).abs() < 1e-9);
            assert!(d[2].abs() < 1e-9);
        }
    }

    #[test]
    fn pooling_and_upsampling_definitions() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full([2, 4, 4], 1.5));
        let p = g.avgpool2x(x).unwrap();
        assert_eq!(g.value(p).shape(), &[2, 2, 2]);
        assert!(g.value(p).data().iter().all(|&v| v == 1.5));

        let v = g.constant(Tensor::full([1, 1, 1], 0.7));
        let k = g.constant(Tensor::ones([1, 2, 2]));
        let u = g.upsample2x(v, k).unwrap();
        assert_eq!(g.value(u).shape(), &[1, 2, 2]);
        assert!(g.value(u).data().iter().all(|&e| e == 0.7));

        let odd = g.constant(Tensor::zeros([1, 3, 4]));
        assert!(matches!(g.avgpool2x(odd), Err(Error::Dimension(_))));
    }

    #[test]
    fn sum_gives_all_ones_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_fn([2, 3, 2], |i| i as f64), true);
        let l = g.sum(x);
        let grads = g.backward(l).unwrap();
        assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn frozen_boundary_blocks_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::ones([3]), true);
        let cut = g.frozen_boundary(x);
        let w = g.leaf(Tensor::full([3], 2.0), true);
        let y = g.mul(cut, w).unwrap();
        let l = g.sum(y);
        let grads = g.backward(l).unwrap();
        assert!(grads.get(x).is_none());
        assert_eq!(grads.get(w).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn non_scalar_loss_is_contract_error() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::ones([2]), true);
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn constant_ops_are_not_recorded() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::ones([2, 2]));
        let b = g.constant(Tensor::ones([2, 2]));
        let c = g.matmul(a, b).unwrap();
        let _ = g.sum(c);
        assert_eq!(g.tape_len(), 0);
        let w = g.leaf(Tensor::ones([2, 2]), true);
        let _ = g.matmul(c, w).unwrap();
        assert_eq!(g.tape_len(), 1);
    }

    #[test]
    fn merge_tokens_places_rows() {
        let mut g = Graph::new();
        let vis = g.leaf(t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]), true);
        let mask = g.leaf(t(&[2], &[9.0, 9.0]), true);
        let m = g.merge_tokens(vis, mask, &[vec![2, 0]], 3).unwrap();
        assert_eq!(g.value(m).data(), &[3.0, 4.0, 9.0, 9.0, 1.0, 2.0]);
        let l = g.sum(m);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(mask).unwrap().data(), &[1.0, 1.0]);
        assert_eq!(grads.get(vis).unwrap().data(), &[1.0; 4]);
    }
}
