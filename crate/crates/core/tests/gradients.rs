use echoir_core::gradcheck::{grad_check, random_tensor, run_suite, standard_suite, weighted_sum};
use echoir_core::tensor::{broadcast_shape, Conv2dOptions, Graph};
use echoir_core::{Precision, Tensor};
use proptest::prelude::*;

#[test]
fn standard_suite_passes() {
    let reports = run_suite(&standard_suite());
    for r in &reports {
        println!("{:<24} {:?} (limit {:e})", r.name, r.max_error, r.threshold);
    }
    let failed: Vec<_> = reports.iter().filter(|r| !r.passed()).map(|r| &r.name).collect();
    assert!(failed.is_empty(), "failing cases: {failed:?}");
}

#[test]
fn composed_graph_is_topological() {
    let x = random_tensor(&[2, 4, 4], 1, -1.0, 1.0, true);
    let w = random_tensor(&[2, 2, 3, 3], 2, -1.0, 1.0, true);
    let h = x.conv2d(&w, None, Conv2dOptions::new(1, 1, 1)).unwrap().gelu();
    let y = h.add(&x).unwrap().mul(&h).unwrap().sum();
    let g = Graph::from_root(&y);
    assert!(g.is_topological());
    assert_eq!(g.kinds().last(), Some(&"sum"));
}

#[test]
fn standard_precision_gradients_track_wide() {
    let wide = random_tensor(&[6], 3, -1.0, 1.0, false);
    let narrow = Tensor::with_precision(&[6], wide.to_vec(), true, Precision::Standard).unwrap();
    let wide = Tensor::new(&[6], wide.to_vec(), true).unwrap();
    for t in [&wide, &narrow] {
        t.gelu().mul(t).unwrap().sum().backward().unwrap();
    }
    for (a, b) in wide.grad().unwrap().iter().zip(narrow.grad().unwrap()) {
        assert!((a - b).abs() < 1e-5);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn conv_gradients_for_random_geometry(
        c in 1usize..3, h in 3usize..6, w in 3usize..6, k in 1usize..4,
        stride in 1usize..3, pad in 0usize..2, seed in 0u64..1000,
    ) {
        prop_assume!(h + 2 * pad >= k && w + 2 * pad >= k);
        let x = random_tensor(&[c, h, w], seed, -1.0, 1.0, false);
        let weight = random_tensor(&[2, c, k, k], seed + 1, -1.0, 1.0, false);
        let err = grad_check(
            |x| weighted_sum(&x.conv2d(&weight, None, Conv2dOptions::new(stride, pad, 1))?, seed),
            &x,
            1e-6,
        ).unwrap();
        prop_assert!(err < 1e-6, "{}", err);
    }

    #[test]
    fn broadcast_is_symmetric(a in proptest::collection::vec(1usize..4, 0..4),
                              b in proptest::collection::vec(1usize..4, 0..4)) {
        prop_assert_eq!(broadcast_shape(&a, &b), broadcast_shape(&b, &a));
    }

    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..4, cols in 1usize..6, seed in 0u64..1000) {
        let x = random_tensor(&[rows, cols], seed, -30.0, 30.0, false);
        let y = x.softmax(1).unwrap().to_vec();
        for r in 0..rows {
            let s: f64 = y[r * cols..(r + 1) * cols].iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            prop_assert!(y[r * cols..(r + 1) * cols].iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn backward_is_linear_in_the_loss(seed in 0u64..1000, k in -3.0f64..3.0) {
        let x = random_tensor(&[5], seed, -1.0, 1.0, true);
        x.sigmoid().mul(&x).unwrap().sum().backward().unwrap();
        let g1 = x.grad().unwrap();
        x.zero_grad();
        x.sigmoid().mul(&x).unwrap().sum().scale(k).backward().unwrap();
        for (a, b) in g1.iter().zip(x.grad().unwrap()) {
            prop_assert!((k * a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_output_is_standardized(c in 2usize..6, seed in 0u64..1000) {
        let x = random_tensor(&[c, 3, 2], seed, -5.0, 5.0, false);
        let gamma = Tensor::new(&[c], vec![1.0; c], false).unwrap();
        let beta = Tensor::new(&[c], vec![0.0; c], false).unwrap();
        let y = x.layer_norm(&gamma, &beta, 0, 1e-12).unwrap().to_vec();
        for p in 0..6 {
            let col: Vec<f64> = (0..c).map(|ch| y[ch * 6 + p]).collect();
            let mean = col.iter().sum::<f64>() / c as f64;
            prop_assert!(mean.abs() < 1e-10);
        }
    }
}
