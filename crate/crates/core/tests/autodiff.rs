use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vitfreeze::autodiff::{GeluKind, Graph, NodeId};
use vitfreeze::gradcheck::check;
use vitfreeze::{Error, Tensor};

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
}

/// Two-layer MLP loss; `frozen` inserts a boundary between the layers.
fn two_layer(x: &Tensor, w1: &Tensor, w2: &Tensor, frozen: bool) -> (Graph, [NodeId; 5]) {
    let mut g = Graph::new();
    let xi = g.leaf(x.clone(), true);
    let a = g.leaf(w1.clone(), true);
    let b = g.leaf(w2.clone(), true);
    let h = g.matmul(xi, a).unwrap();
    let act = g.gelu(h, GeluKind::Tanh);
    let h = if frozen { g.frozen_boundary(act) } else { act };
    let y = g.matmul(h, b).unwrap();
    let sq = g.mul(y, y).unwrap();
    let loss = g.sum(sq);
    (g, [xi, a, b, act, loss])
}

#[test]
fn frozen_boundary_matches_truncated_subgraph() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&mut rng, &[3, 4]);
        let w1 = random(&mut rng, &[4, 5]);
        let w2 = random(&mut rng, &[5, 2]);
        let (g, [xi, a, b, act, loss]) = two_layer(&x, &w1, &w2, true);
        let grads = g.backward(loss).unwrap();
        assert!(!grads.contains(xi) && !grads.contains(a), "gradient crossed the boundary");

        // Oracle: the upper layer alone, fed the lower layer's value as a constant.
        let mut sub = Graph::new();
        let h = sub.constant(g.value(act).clone());
        let b2 = sub.leaf(w2.clone(), true);
        let y = sub.matmul(h, b2).unwrap();
        let sq = sub.mul(y, y).unwrap();
        let l2 = sub.sum(sq);
        let oracle = sub.backward(l2).unwrap();
        assert_eq!(g.value(loss).item().unwrap(), sub.value(l2).item().unwrap());
        let diff = grads.get(b).unwrap().max_abs_diff(oracle.get(b2).unwrap());
        assert!(diff <= 1e-12, "seed {seed}: {diff}");
    }
}

#[test]
fn boundary_directly_above_leaf_blocks_it() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::ones([2, 2]), true);
    let fx = g.frozen_boundary(x);
    let w = g.leaf(Tensor::full([2, 2], 3.0), true);
    let y = g.mul(fx, w).unwrap();
    let l = g.sum(y);
    let grads = g.backward(l).unwrap();
    assert!(!grads.contains(x));
    assert_eq!(grads.get(w).unwrap().data(), &[1.0; 4]);
}

#[test]
fn sum_gradient_is_all_ones() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::from_fn([2, 3, 4], |k| k as f64), true);
    let l = g.sum(x);
    let grads = g.backward(l).unwrap();
    assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 1.0));
}

#[test]
fn non_scalar_loss_is_contract_error() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::ones([2]), true);
    assert!(matches!(g.backward(x), Err(Error::Contract(_))));
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut g = Graph::new();
    let a = g.leaf(Tensor::ones([2, 3]), true);
    let b = g.leaf(Tensor::ones([4, 5]), true);
    let msg = g.matmul(a, b).unwrap_err().to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
}

#[test]
fn constant_graphs_record_nothing() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::ones([3, 3]));
    let b = g.matmul(a, a).unwrap();
    let _ = g.softmax_last(b);
    assert_eq!(g.tape_len(), 0);
}

#[test]
fn softmax_rows_and_layer_norm_moments() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut g = Graph::new();
    let x = g.leaf(random(&mut rng, &[4, 6]), true);
    let s = g.softmax_last(x);
    for row in g.value(s).data().chunks(6) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }
    let y = g.leaf(Tensor::from_fn([3, 16], |_| rng.gen_range(-5.0..5.0)), true);
    let gamma = g.constant(Tensor::ones([16]));
    let beta = g.constant(Tensor::zeros([16]));
    let n = g.layer_norm(y, gamma, beta, 1e-12).unwrap();
    for row in g.value(n).data().chunks(16) {
        assert!((row.iter().sum::<f64>() / 16.0).abs() < 1e-10);
    }
}

#[test]
fn avgpool_keeps_constant_maps_and_upsample_copies() {
    let mut g = Graph::new();
    let c = g.leaf(Tensor::full([2, 4, 4], 0.3), true);
    let p = g.avgpool2x(c).unwrap();
    assert!(g.value(p).data().iter().all(|&v| (v - 0.3).abs() < 1e-15));
    let v = g.leaf(Tensor::full([1, 1, 1], 2.5), true);
    let k = g.leaf(Tensor::ones([1, 2, 2]), true);
    let u = g.upsample2x(v, k).unwrap();
    assert_eq!(g.value(u).shape(), &[1, 2, 2]);
    assert_eq!(g.value(u).data(), &[2.5; 4]);
    let odd = g.leaf(Tensor::ones([1, 3, 4]), true);
    assert!(matches!(g.avgpool2x(odd), Err(Error::Dimension(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn matmul_gradients_any_shape(m in 1usize..5, k in 1usize..5, n in 1usize..5, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = vec![random(&mut rng, &[m, k]), random(&mut rng, &[k, n])];
        let w = random(&mut rng, &[m, n]);
        let f = move |xs: &[Tensor], grad: bool| -> vitfreeze::Result<(f64, Vec<Tensor>)> {
            let mut g = Graph::new();
            let a = g.leaf(xs[0].clone(), true);
            let b = g.leaf(xs[1].clone(), true);
            let c = g.matmul(a, b)?;
            let wc = g.constant(w.clone());
            let p = g.mul(c, wc)?;
            let l = g.sum(p);
            let v = g.value(l).item()?;
            if !grad {
                return Ok((v, vec![]));
            }
            let gr = g.backward(l)?;
            Ok((v, vec![gr.get(a).unwrap().clone(), gr.get(b).unwrap().clone()]))
        };
        let (err, _) = check(&inputs, &f, 1e-5, 64, &mut rng).unwrap();
        prop_assert!(err < 1e-6, "rel err {}", err);
    }
}
