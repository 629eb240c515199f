mod common;

use common::{blob_image, loss_config, random_image, rng, trainable, NetLoss, NEIGHBORHOOD_VARIANTS};
use hmrf_unet::fuzzy::{hmrf_loss, hmrf_loss_grad, NeighborhoodVariant};
use hmrf_unet::neighborhood::Cliques;
use hmrf_unet::types::ConfidenceMap;
use hmrf_unet::unet::NetworkConfig;
use proptest::prelude::*;
use rand::Rng;

fn small_net() -> NetworkConfig {
    NetworkConfig { levels: 1, convs_per_level: 1, base_kernels: 4, ..NetworkConfig::default() }
}

fn random_confidences(seed: u64, h: usize, w: usize, k: usize) -> ConfidenceMap {
    let mut r = rng(seed);
    let mut data = vec![0.0; k * h * w];
    for s in 0..h * w {
        let raw: Vec<f64> = (0..k).map(|_| r.random_range(0.05..1.0)).collect();
        let total: f64 = raw.iter().sum();
        for l in 0..k {
            data[l * h * w + s] = raw[l] / total;
        }
    }
    ConfidenceMap::new(h, w, k, data).unwrap()
}

#[test]
fn loss_gradient_matches_central_differences_on_confidences() {
    let (h, w) = (5, 6);
    let img = random_image(&mut rng(3), h, w);
    let cliques = Cliques::new(h, w).unwrap();
    for variant in NeighborhoodVariant::ALL {
        let cfg = loss_config(variant, 0.3);
        let c = random_confidences(11, h, w, 2);
        let (_, grad) = hmrf_loss_grad(&img, &c, &cliques, &cfg).unwrap();
        let step = 1e-6;
        for i in (0..c.data().len()).step_by(3) {
            let eval = |delta: f64| {
                let mut d = c.data().to_vec();
                d[i] += delta;
                let shifted = ConfidenceMap::new_unchecked(h, w, 2, d).unwrap();
                hmrf_loss(&img, &shifted, &cliques, &cfg).unwrap().total
            };
            let numeric = (eval(step) - eval(-step)) / (2.0 * step);
            let err = (numeric - grad[i]).abs() / numeric.abs().max(grad[i].abs()).max(1e-7);
            assert!(err < 1e-5, "{variant:?} index {i}: analytic {} numeric {numeric}", grad[i]);
        }
    }
}

#[test]
fn three_class_gradient_matches_central_differences() {
    let (h, w) = (4, 4);
    let img = random_image(&mut rng(5), h, w);
    let cliques = Cliques::new(h, w).unwrap();
    let cfg = loss_config(NeighborhoodVariant::Banerjee, 0.05);
    let c = random_confidences(6, h, w, 3);
    let (_, grad) = hmrf_loss_grad(&img, &c, &cliques, &cfg).unwrap();
    for i in 0..c.data().len() {
        let eval = |delta: f64| {
            let mut d = c.data().to_vec();
            d[i] += delta;
            hmrf_loss(&img, &ConfidenceMap::new_unchecked(h, w, 3, d).unwrap(), &cliques, &cfg).unwrap().total
        };
        let numeric = (eval(1e-6) - eval(-1e-6)) / 2e-6;
        assert!((numeric - grad[i]).abs() <= 1e-5 * numeric.abs().max(1e-2), "index {i}");
    }
}

#[test]
fn unet_composition_passes_gradient_check_for_each_variant() {
    let images: Vec<_> = (0..2).map(|i| blob_image(&mut rng(i), 8, 8, 0.1)).collect();
    for variant in NEIGHBORHOOD_VARIANTS {
        let f = NetLoss::new(&small_net(), 7, images.clone(), loss_config(variant, 0.1));
        let report = f.fd_check(40, 1, 1e-5, 1e-4);
        assert!(report.num_checked() >= 30, "{variant:?}: only {} probes off kinks", report.num_checked());
        assert!(report.passed(), "{variant:?}: max relative error {}", report.max_rel_error());
    }
}

#[test]
fn gradient_reaches_every_trainable_tensor() {
    let images: Vec<_> = (0..2).map(|i| blob_image(&mut rng(20 + i), 16, 16, 0.1)).collect();
    let f = NetLoss::new(&NetworkConfig::default(), 3, images, loss_config(NeighborhoodVariant::Potts, 0.05));
    let (mut graph, loss, ids) = f.build(&f.params()).unwrap();
    graph.backward(loss).unwrap();
    let names: Vec<String> = trainable(&f.weights).into_iter().map(|i| f.weights.specs()[i].name.clone()).collect();
    for (id, name) in ids.iter().zip(&names) {
        let g = graph.grad(*id).unwrap();
        assert!(g.iter().any(|v| *v != 0.0), "{name} received no gradient");
        assert!(g.iter().all(|v| v.is_finite()), "{name} has a non-finite gradient");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn loss_is_invariant_to_swapping_classes(seed in 0u64..1000, variant_idx in 0usize..5) {
        let (h, w) = (4, 5);
        let img = random_image(&mut rng(seed), h, w);
        let c = random_confidences(seed + 1, h, w, 2);
        let cliques = Cliques::new(h, w).unwrap();
        let cfg = loss_config(NeighborhoodVariant::ALL[variant_idx], 0.2);
        let a = hmrf_loss(&img, &c, &cliques, &cfg).unwrap();
        let b = hmrf_loss(&img, &c.permuted(&[1, 0]), &cliques, &cfg).unwrap();
        prop_assert!((a.total - b.total).abs() < 1e-10);
    }

    #[test]
    fn potts_term_is_nonnegative_and_zero_when_constant(seed in 0u64..1000, p in 0.0f64..1.0) {
        let (h, w) = (4, 4);
        let img = random_image(&mut rng(seed), h, w);
        let cliques = Cliques::new(h, w).unwrap();
        let mut cfg = loss_config(NeighborhoodVariant::Potts, 0.05);
        cfg.weights = hmrf_unet::fuzzy::LossWeights::new(1.0).unwrap();
        let varied = hmrf_loss(&img, &random_confidences(seed, h, w, 2), &cliques, &cfg).unwrap();
        prop_assert!(varied.neighborhood >= 0.0);
        let flat = ConfidenceMap::constant(h, w, &[p, 1.0 - p]).unwrap();
        prop_assert!(hmrf_loss(&img, &flat, &cliques, &cfg).unwrap().neighborhood.abs() < 1e-12);
    }
}
