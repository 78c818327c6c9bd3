use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vitfreeze::autodiff::Graph;
use vitfreeze::objective::hog::{cell_histograms_raw, gradient_field};
use vitfreeze::objective::{
    build_targets, hog_features, local_mim_loss, sample_mask, ChannelRule, HogConfig, ScaleTerm,
};
use vitfreeze::Tensor;

#[test]
fn every_patch_is_masked_three_quarters_of_the_time() {
    let (n, seeds) = (196, 10_000);
    let mut hits = vec![0usize; n];
    for seed in 0..seeds {
        let m = sample_mask(seed, n, 0.75).unwrap();
        assert_eq!(m.masked_indices.len(), 147);
        for &i in &m.masked_indices {
            hits[i] += 1;
        }
    }
    for (i, &h) in hits.iter().enumerate() {
        let freq = h as f64 / seeds as f64;
        assert!((freq - 0.75).abs() <= 0.02, "patch {i}: {freq}");
    }
}

#[test]
fn mask_weights_average_to_the_ratio_at_every_scale() {
    for seed in 0..50 {
        let m = sample_mask(seed, 64, 0.75).unwrap();
        for s in [16, 8, 4, 2, 1] {
            let w = m.scale_weights(s).unwrap();
            let mean = w.iter().sum::<f64>() / w.len() as f64;
            assert!((mean - 0.75).abs() < 1e-12, "scale {s}: {mean}");
        }
    }
}

#[test]
fn mask_ratio_outside_open_interval_is_rejected() {
    for r in [0.0, 1.0, -0.1, f64::NAN] {
        assert!(sample_mask(0, 16, r).is_err());
    }
}

#[test]
fn histogram_mass_equals_gradient_magnitude() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for rule in [ChannelRule::MaxMagnitude, ChannelRule::Sum] {
        let img = Tensor::from_fn([3, 16, 16], |_| rng.gen::<f64>());
        let field = gradient_field(&img, rule).unwrap();
        let total: f64 = field.votes.iter().map(|v| v.1).sum();
        for cell in [1, 2, 4, 8, 16] {
            let h = cell_histograms_raw(&field, cell, 9).unwrap();
            let mass: f64 = h.data().iter().sum();
            assert!((mass - total).abs() <= 1e-10 * total, "cell {cell}");
        }
    }
}

#[test]
fn shifting_by_one_cell_shifts_the_descriptor() {
    // An object on a flat background, kept a cell away from every border.
    let object = |y: usize, x: usize| if (6..11).contains(&y) && (5..9).contains(&x) { 0.9 } else { 0.2 };
    let a = Tensor::from_fn([1, 24, 24], |k| object(k / 24, k % 24));
    let b = Tensor::from_fn([1, 24, 24], |k| {
        let (y, x) = (k / 24, k % 24);
        if x < 4 { 0.2 } else { object(y, x - 4) }
    });
    let cfg = HogConfig::default();
    let ha = hog_features(&a, 4, &cfg).unwrap();
    let hb = hog_features(&b, 4, &cfg).unwrap();
    let cells = 6;
    for bin in 0..9 {
        for cy in 0..cells {
            for cx in 0..cells - 1 {
                let va = ha.data()[(bin * cells + cy) * cells + cx];
                let vb = hb.data()[(bin * cells + cy) * cells + cx + 1];
                assert!((va - vb).abs() < 1e-12, "bin {bin} cell ({cy},{cx})");
            }
        }
    }
}

#[test]
fn normalized_cells_have_unit_norm_or_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut img = Tensor::from_fn([3, 16, 16], |_| rng.gen::<f64>());
    // Flatten the top-left cell so it carries no gradient at all.
    for c in 0..3 {
        for y in 0..5 {
            for x in 0..5 {
                img.data_mut()[(c * 16 + y) * 16 + x] = 0.5;
            }
        }
    }
    let h = hog_features(&img, 4, &HogConfig::default()).unwrap();
    for cell in 0..16 {
        let n2: f64 = (0..9).map(|b| h.data()[b * 16 + cell].powi(2)).sum();
        if cell == 0 {
            assert_eq!(n2, 0.0);
        } else {
            assert!((n2.sqrt() - 1.0).abs() < 1e-6, "cell {cell}: {}", n2.sqrt());
        }
    }
}

#[test]
fn targets_have_one_row_per_cell() {
    let img = Tensor::from_fn([3, 64, 64], |k| (k % 7) as f64 / 7.0);
    let t = build_targets(&img, &[16, 8, 4], &HogConfig::default()).unwrap();
    for (map, s) in t.maps.iter().zip([16, 8, 4]) {
        assert_eq!(map.as_ref().unwrap().shape(), &[s * s, 9]);
    }
    assert!(build_targets(&img, &[5], &HogConfig::default()).is_err());
}

fn loss_of(pred: Vec<f64>, target: Vec<f64>, mask: Vec<f64>, images: usize, features: usize) -> f64 {
    let rows = mask.len();
    let mut g = Graph::new();
    let p = g.leaf(Tensor::new([rows, features], pred).unwrap(), true);
    let out = local_mim_loss(
        &mut g,
        vec![ScaleTerm {
            key: 0,
            pred: p,
            target: Tensor::new([rows, features], target).unwrap(),
            mask,
            images,
            weight: 1.0,
        }],
    )
    .unwrap();
    g.value(out.total).item().unwrap()
}

#[test]
fn hand_computed_losses() {
    let pred = vec![1.0, 2.0, 3.0, 4.0];
    let target = vec![0.0, 0.0, 1.0, 1.0];
    // Row errors: ‖(1,2)‖² = 5 and ‖(2,3)‖² = 13.
    assert_eq!(loss_of(pred.clone(), target.clone(), vec![1.0, 0.0], 1, 2), 2.5);
    assert_eq!(loss_of(pred.clone(), target.clone(), vec![1.0, 1.0], 1, 2), 4.5);
    // Two single-row images are normalized separately and averaged.
    assert_eq!(loss_of(pred.clone(), target.clone(), vec![1.0, 1.0], 2, 2), 4.5);
    assert_eq!(loss_of(pred, target, vec![0.0, 0.0], 1, 2), 0.0);
}

#[test]
fn loss_ignores_image_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (images, rows, f) = (5, 4, 3);
    let pred: Vec<f64> = (0..images * rows * f).map(|_| rng.gen()).collect();
    let target: Vec<f64> = (0..images * rows * f).map(|_| rng.gen()).collect();
    let mask: Vec<f64> = (0..images * rows).map(|_| rng.gen_range(0..2) as f64).collect();
    let base = loss_of(pred.clone(), target.clone(), mask.clone(), images, f);
    let perm = [3, 0, 4, 1, 2];
    let shuffle = |v: &[f64], per: usize| -> Vec<f64> {
        perm.iter().flat_map(|&i| v[i * per..(i + 1) * per].to_vec()).collect()
    };
    let permuted = loss_of(shuffle(&pred, rows * f), shuffle(&target, rows * f), shuffle(&mask, rows), images, f);
    assert!((base - permuted).abs() <= 1e-12 * base.abs());
}
