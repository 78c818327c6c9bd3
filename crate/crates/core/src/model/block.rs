use rand_chacha::ChaCha8Rng;

use super::params::{xavier, Binder, ParamGroup, ParamId, ParamStore};
use crate::autodiff::{GeluKind, Graph, NodeId};
use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub(crate) struct Norm {
    gamma: ParamId,
    beta: ParamId,
}

impl Norm {
    pub fn new(store: &mut ParamStore, name: &str, group: ParamGroup, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones([dim]), group),
            beta: store.add(format!("{name}.beta"), Tensor::zeros([dim]), group),
        }
    }

    pub fn forward(&self, g: &mut Graph, b: &mut Binder, x: NodeId, eps: f64) -> Result<NodeId> {
        let gamma = b.param(g, self.gamma);
        let beta = b.param(g, self.beta);
        g.layer_norm(x, gamma, beta, eps)
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Dense {
    w: ParamId,
    b: ParamId,
}

impl Dense {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        group: ParamGroup,
        fan_in: usize,
        fan_out: usize,
    ) -> Self {
        Self {
            w: store.add(format!("{name}.weight"), xavier(rng, fan_in, fan_out), group),
            b: store.add(format!("{name}.bias"), Tensor::zeros([fan_out]), group),
        }
    }

    pub fn forward(&self, g: &mut Graph, b: &mut Binder, x: NodeId) -> Result<NodeId> {
        let w = b.param(g, self.w);
        let bias = b.param(g, self.b);
        g.linear(x, w, bias)
    }
}

/// Pre-norm transformer block: `x + MSA(LN(x))`, then `x + MLP(LN(x))`.
#[derive(Clone, Debug)]
pub(crate) struct Block {
    ln1: Norm,
    q: Dense,
    k: Dense,
    v: Dense,
    proj: Dense,
    ln2: Norm,
    fc1: Dense,
    fc2: Dense,
    dim: usize,
    heads: usize,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct BlockOpts {
    pub eps: f64,
    pub gelu: GeluKind,
}

impl Block {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        group: ParamGroup,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
    ) -> Self {
        let hidden = dim * mlp_ratio;
        Self {
            ln1: Norm::new(store, &format!("{name}.norm1"), group, dim),
            q: Dense::new(store, rng, &format!("{name}.attn.q"), group, dim, dim),
            k: Dense::new(store, rng, &format!("{name}.attn.k"), group, dim, dim),
            v: Dense::new(store, rng, &format!("{name}.attn.v"), group, dim, dim),
            proj: Dense::new(store, rng, &format!("{name}.attn.proj"), group, dim, dim),
            ln2: Norm::new(store, &format!("{name}.norm2"), group, dim),
            fc1: Dense::new(store, rng, &format!("{name}.mlp.fc1"), group, dim, hidden),
            fc2: Dense::new(store, rng, &format!("{name}.mlp.fc2"), group, hidden, dim),
            dim,
            heads,
        }
    }

    /// `x: [batch, tokens, dim]`.
    pub fn forward(&self, g: &mut Graph, b: &mut Binder, x: NodeId, opts: BlockOpts) -> Result<NodeId> {
        let shape = g.value(x).shape().to_vec();
        let (batch, tokens) = (shape[0], shape[1]);
        let dh = self.dim / self.heads;
        let split = [batch, tokens, self.heads, dh];

        let h = self.ln1.forward(g, b, x, opts.eps)?;
        let q = self.q.forward(g, b, h)?;
        let k = self.k.forward(g, b, h)?;
        let v = self.v.forward(g, b, h)?;
        let q = g.reshape(q, &split)?;
        let q = g.permute(q, &[0, 2, 1, 3])?;
        let k = g.reshape(k, &split)?;
        let kt = g.permute(k, &[0, 2, 3, 1])?;
        let v = g.reshape(v, &split)?;
        let v = g.permute(v, &[0, 2, 1, 3])?;
        let scores = g.bmm(q, kt)?;
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
        let attn = g.softmax_last(scores);
        let ctx = g.bmm(attn, v)?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[batch, tokens, self.dim])?;
        let out = self.proj.forward(g, b, ctx)?;
        let x = g.add(x, out)?;

        let h = self.ln2.forward(g, b, x, opts.eps)?;
        let h = self.fc1.forward(g, b, h)?;
        let h = g.gelu(h, opts.gelu);
        let h = self.fc2.forward(g, b, h)?;
        g.add(x, h)
    }
}
