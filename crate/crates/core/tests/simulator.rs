mod common;

use ndarray::{Array1, Array2};
use proptest::prelude::*;

use pim_aging::aging::{generate_mask, LayerMask};
use pim_aging::doft::Network;
use pim_aging::pim_sim::{layer_forward_functional, network_forward, Activation, PimConfig, SimMode};
use pim_aging::quantize::BitPlanes;
use pim_aging::seed;

#[test]
fn bitexact_and_functional_agree_or_stay_within_bound() {
    common::fidelity_suite(300, 11).unwrap();
}

fn toy_net(q: u32) -> Network {
    let mut rng = seed::rng(5);
    let widths = [12usize, 6, 4];
    let lim = pim_aging::quantize::code_limit(q);
    let codes: Vec<Array2<i64>> = widths
        .windows(2)
        .map(|w| {
            use rand::Rng;
            Array2::from_shape_simple_fn((w[0], w[1]), || 2 * rng.random_range(0..=lim) - lim)
        })
        .collect();
    let biases = vec![Array1::from(vec![1.0f32; 6]), Array1::zeros(4)];
    Network::from_codes(&widths, q, 4, &codes, biases, vec![30.0 * lim as f32], 0.1).unwrap()
}

#[test]
fn no_mask_equals_all_ones_mask() {
    for q in [1, 3] {
        let net = toy_net(q);
        let cfg = PimConfig::default().with_bits(q, 4);
        let x = Array2::from_shape_fn((5, 12), |(i, j)| ((i * 7 + j * 3) % 11) as f32 / 10.0);
        let ones = pim_aging::aging::AgingMask::unaged(&net.shapes(), q);
        for mode in SimMode::ALL {
            let a = network_forward(&net, None, &cfg, mode, x.view()).unwrap();
            let b = network_forward(&net, Some(&ones), &cfg, mode, x.view()).unwrap();
            assert_eq!(a, b, "{mode}");
        }
    }
}

#[test]
fn vanishing_degrees_annihilate_the_sum() {
    let net = toy_net(2);
    let cfg = PimConfig::default().with_bits(2, 4);
    let m = generate_mask(&net.shapes(), 2, 1.0, 1e-6, 3).unwrap();
    let x = Array2::from_elem((3, 12), 1.0f32);
    let layer = &net.layers[0];
    let planes = pim_aging::quantize::quantize_inputs(x.view(), 4).unwrap();
    let zero_bias = Array1::<f32>::zeros(6);
    let out = pim_aging::pim_sim::layer_forward_bitexact(
        &planes,
        &layer.planes,
        Some(&m.layers[0]),
        zero_bias.view(),
        &cfg,
        Activation::Identity,
    )
    .unwrap();
    assert!(out.pre.iter().all(|&v| v <= 0));
}

proptest! {
    #[test]
    fn functional_is_linear_in_a_degree_entry(
        codes in proptest::collection::vec(prop::sample::select(vec![-3i64, -1, 1, 3]), 8),
        x in proptest::collection::vec(0.0f32..15.0, 4),
        d in 0.05f32..1.0,
        row in 0usize..4,
    ) {
        let w = BitPlanes::from_codes(Array2::from_shape_vec((4, 2), codes).unwrap().view(), 2, 1.0).unwrap();
        let xs = Array2::from_shape_vec((1, 4), x).unwrap();
        // Pre-floor value is recovered exactly from the lumped weights.
        let lumped = |m: &LayerMask| pim_aging::pim_sim::effective_weights(&w, Some(m));
        let mut planes = vec![Array2::<f32>::ones((4, 2)); 2];
        let base = lumped(&LayerMask::new(planes.clone()).unwrap());
        planes[1][(row, 0)] = d;
        let scaled = lumped(&LayerMask::new(planes.clone()).unwrap());
        planes[1][(row, 0)] = 0.5 * d + 0.5;
        let mid = lumped(&LayerMask::new(planes).unwrap());
        let y = |m: &Array2<f32>| xs.dot(m)[(0, 0)];
        prop_assert!((y(&mid) - 0.5 * (y(&base) + y(&scaled))).abs() < 1e-3);
    }

    #[test]
    fn unaged_functional_is_integer_matmul(
        codes in proptest::collection::vec(prop::sample::select(vec![-7i64, -5, -3, -1, 1, 3, 5, 7]), 12),
        x in proptest::collection::vec(0u32..=7, 8),
    ) {
        let w = BitPlanes::from_codes(Array2::from_shape_vec((4, 3), codes).unwrap().view(), 3, 1.0).unwrap();
        let xv = Array2::from_shape_vec((2, 4), x).unwrap();
        let cfg = PimConfig::default().with_bits(3, 3);
        let out = layer_forward_functional(
            xv.mapv(|v| v as f32).view(), &w, None, Array1::zeros(3).view(), &cfg, Activation::Identity,
        ).unwrap();
        prop_assert_eq!(out.pre, xv.mapv(i64::from).dot(&w.codes()));
    }
}
