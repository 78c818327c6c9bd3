//! Shows how a frozen boundary cuts the tape: the same two-layer network
//! is differentiated with and without its first layer frozen.

use vitfreeze::autodiff::{GeluKind, Graph};
use vitfreeze::Tensor;

fn build(frozen_first: bool) -> anyhow::Result<()> {
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_fn([4, 8], |k| (k as f64 * 0.37).sin()));
    let w1 = g.leaf(Tensor::from_fn([8, 16], |k| (k as f64 * 0.11).cos() * 0.2), !frozen_first);
    let w2 = g.leaf(Tensor::from_fn([16, 2], |k| (k as f64 * 0.23).sin() * 0.2), true);
    let h = g.matmul(x, w1)?;
    let mut h = g.gelu(h, GeluKind::Tanh);
    if frozen_first {
        h = g.frozen_boundary(h);
    }
    let y = g.matmul(h, w2)?;
    let sq = g.mul(y, y)?;
    let loss = g.mean(sq);
    let grads = g.backward(loss)?;
    println!(
        "first layer {}: tape {} ops, loss {:.6}, grad for w1: {}, |grad w2| {:.6}",
        if frozen_first { "frozen   " } else { "trainable" },
        g.tape_len(),
        g.value(loss).item()?,
        grads.contains(w1),
        grads.get(w2).map(|t| t.data().iter().map(|v| v * v).sum::<f64>().sqrt()).unwrap_or(0.0)
    );
    Ok(())
}

fn main() -> anyhow::Result<()> {
    build(false)?;
    build(true)
}
