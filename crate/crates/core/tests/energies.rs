mod common;

use common::{all_binary_3x3, brute_force_minimum, random_image, random_labels, rng};
use hmrf_unet::discrete::{
    em_icm_segment, likelihood_energy, neighborhood_energy, DiscreteNeighborhoodConfig, EmIcmConfig, Init, PenaltyKind,
    Phase,
};
use hmrf_unet::fuzzy::{fuzzy_class_params, fuzzy_likelihood_energy, fuzzy_potts, voxel_fuzzy_params};
use hmrf_unet::neighborhood::{Cliques, NeighborhoodSystem};
use hmrf_unet::types::{one_hot, ClassParams, LabelMap, ParamKind};
use proptest::prelude::*;
use rand::Rng;

fn argmin_set(energies: &[f64]) -> Vec<usize> {
    let best = energies.iter().copied().fold(f64::INFINITY, f64::min);
    (0..energies.len()).filter(|&i| energies[i] <= best + 1e-12 * best.abs().max(1.0)).collect()
}

#[test]
fn fuzzy_and_discrete_potts_share_minimizers_on_3x3() {
    let cliques = Cliques::new(3, 3).unwrap();
    for alpha in [0.1, 1.0, 10.0] {
        let cfg = DiscreteNeighborhoodConfig { kind: PenaltyKind::Potts, alpha, threshold: 0.2 };
        let dummy = ClassParams::discrete(vec![0.0, 1.0], vec![1.0, 1.0]).unwrap();
        let labelings: Vec<LabelMap> = all_binary_3x3().collect();
        let discrete: Vec<f64> = labelings.iter().map(|l| neighborhood_energy(l, &cliques, &cfg, &dummy)).collect();
        let fuzzy: Vec<f64> = labelings.iter().map(|l| fuzzy_potts(&one_hot(l), &cliques.first, &[alpha; 9])).collect();
        let minimizers = argmin_set(&discrete);
        assert_eq!(minimizers, argmin_set(&fuzzy), "alpha {alpha}");
        assert_eq!(minimizers, vec![0, 511]);
    }
}

#[test]
fn icm_with_exhaustive_restarts_reaches_global_minimum() {
    let mut r = rng(42);
    for kind in [PenaltyKind::Potts, PenaltyKind::Banerjee] {
        for _ in 0..5 {
            let img = random_image(&mut r, 3, 3);
            let params = ClassParams::discrete(
                vec![r.random_range(0.0..0.5), r.random_range(0.5..1.0)],
                vec![r.random_range(0.05..0.4), r.random_range(0.05..0.4)],
            )
            .unwrap();
            let nb = DiscreteNeighborhoodConfig { kind, alpha: r.random_range(0.05..2.0), threshold: 0.2 };
            let exact = brute_force_minimum(&img, &params, &nb);
            let best = all_binary_3x3()
                .map(|init| {
                    let cfg = EmIcmConfig {
                        neighborhood: nb,
                        init: Init::Labels(init),
                        fixed_params: Some(params.clone()),
                        ..EmIcmConfig::default()
                    };
                    em_icm_segment(&img, &cfg).unwrap().final_energy()
                })
                .fold(f64::INFINITY, f64::min);
            assert!((best - exact).abs() < 1e-9, "{kind:?}: restarts {best} vs exact {exact}");
        }
    }
}

#[test]
fn icm_energy_never_increases_within_sweeps() {
    for seed in 0..10 {
        let mut r = rng(seed);
        let img = random_image(&mut r, 16, 16);
        for kind in [PenaltyKind::Potts, PenaltyKind::Banerjee] {
            let cfg = EmIcmConfig {
                neighborhood: DiscreteNeighborhoodConfig { kind, alpha: 0.5, threshold: 0.2 },
                init: Init::Random { seed },
                ..EmIcmConfig::default()
            };
            let trace = em_icm_segment(&img, &cfg).unwrap().trace;
            for w in trace.windows(2) {
                if matches!(w[1].phase, Phase::IcmSweep(_)) {
                    assert!(w[1].energy <= w[0].energy + 1e-9 * w[0].energy.abs(), "{kind:?} seed {seed}");
                }
            }
        }
    }
}

#[test]
fn potts_m_step_never_increases_energy() {
    let img = random_image(&mut rng(9), 12, 12);
    let cfg = EmIcmConfig { init: Init::Random { seed: 9 }, ..EmIcmConfig::default() };
    let trace = em_icm_segment(&img, &cfg).unwrap().trace;
    assert!(trace.windows(2).all(|w| w[1].energy <= w[0].energy + 1e-9 * w[0].energy.abs()));
}

#[test]
fn separable_image_is_recovered() {
    let truth = LabelMap::new(6, 6, 2, (0..36).map(|s| usize::from(s % 6 >= 3)).collect()).unwrap();
    let mut r = rng(2);
    let img = hmrf_unet::types::Image2D::new(
        6,
        6,
        truth.labels().iter().map(|&l| 0.2 + 0.6 * l as f64 + r.random_range(-0.05..0.05)).collect(),
    )
    .unwrap();
    let result = em_icm_segment(&img, &EmIcmConfig::default()).unwrap();
    assert_eq!(result.labels, truth);
    assert!(result.params.mean(0) < result.params.mean(1));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn one_hot_fuzzy_likelihood_equals_discrete(seed in 0u64..10_000, k in 2usize..4) {
        let mut r = rng(seed);
        let img = random_image(&mut r, 8, 8);
        let labels = random_labels(&mut r, 8, 8, k);
        let c = one_hot(&labels);
        let fitted = fuzzy_class_params(&img, &c).unwrap();
        let field = voxel_fuzzy_params(&c, &fitted).unwrap();
        let mut discrete = fitted.clone();
        discrete.kind = ParamKind::Discrete;
        let want = likelihood_energy(&img, &labels, &discrete).unwrap();
        prop_assert!((fuzzy_likelihood_energy(&img, &field).unwrap() - want).abs() < 1e-9);
    }

    #[test]
    fn neighbor_lists_are_symmetric_and_in_grid(h in 1usize..9, w in 1usize..9, order in 1usize..3) {
        let nbh = NeighborhoodSystem::new(h, w, order).unwrap();
        for s in 0..h * w {
            for &t in nbh.neighbors(s) {
                prop_assert!(t < h * w && t != s);
                prop_assert!(nbh.neighbors(t).contains(&s));
            }
        }
    }

    #[test]
    fn fuzzy_potts_on_one_hot_counts_disagreements(seed in 0u64..10_000, alpha in 0.01f64..5.0) {
        let mut r = rng(seed);
        let labels = random_labels(&mut r, 5, 4, 2);
        let nbh = NeighborhoodSystem::new(5, 4, 1).unwrap();
        let want: f64 = (0..20)
            .map(|s| {
                let n = nbh.neighbors(s);
                let d = n.iter().filter(|&&t| labels.get(t) != labels.get(s)).count();
                alpha * 2.0 * d as f64 / n.len() as f64
            })
            .sum();
        prop_assert!((fuzzy_potts(&one_hot(&labels), &nbh, &[alpha; 20]) - want).abs() < 1e-9);
    }
}
