//! Discrete HMRF energies and the classical EM / ICM solver.
//!
//! Energies follow the usual Gaussian-mixture HMRF model: a per-voxel
//! likelihood term `(y - mu)^2 / (2 sigma^2) + ln sigma` plus a neighborhood
//! penalty, either Potts or the class-statistics penalty with the adaptive
//! per-voxel weight.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::neighborhood::{Cliques, NeighborhoodSystem};
use crate::types::{ClassParams, Image2D, LabelMap, ParamKind};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyKind {
    Potts,
    Banerjee,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscreteNeighborhoodConfig {
    pub kind: PenaltyKind,
    pub alpha: f64,
    /// Dominance threshold `T` for the adaptive Banerjee weight.
    pub threshold: f64,
}

impl Default for DiscreteNeighborhoodConfig {
    fn default() -> Self {
        Self { kind: PenaltyKind::Potts, alpha: 1.0, threshold: 0.2 }
    }
}

impl DiscreteNeighborhoodConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) {
            return Err(Error::Config(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        Ok(())
    }
}

/// Gaussian class-conditional density of intensity `y` under class `l`.
pub fn class_posterior(y: f64, params: &ClassParams, l: usize) -> f64 {
    let (mu, sigma) = (params.mean(l), params.std(l));
    let var = sigma * sigma;
    (-(y - mu) * (y - mu) / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt()
}

/// Negative log-density of one voxel up to the constant `ln sqrt(2 pi)`.
pub fn voxel_likelihood(y: f64, params: &ClassParams, l: usize) -> f64 {
    let (mu, sigma) = (params.mean(l), params.std(l));
    (y - mu) * (y - mu) / (2.0 * sigma * sigma) + sigma.ln()
}

fn check_inputs(img: &Image2D, labels: &LabelMap, params: &ClassParams) -> Result<()> {
    if !labels.same_shape_as(img) {
        return Err(Error::Shape(format!(
            "image {}x{} vs labels {}x{}",
            img.height(),
            img.width(),
            labels.height(),
            labels.width()
        )));
    }
    if let Some(&bad) = labels.labels().iter().find(|&&l| l >= params.num_classes()) {
        return Err(Error::MissingClass { class: bad, available: params.num_classes() });
    }
    Ok(())
}

pub fn likelihood_energy(img: &Image2D, labels: &LabelMap, params: &ClassParams) -> Result<f64> {
    check_inputs(img, labels, params)?;
    Ok(img
        .values()
        .iter()
        .zip(labels.labels())
        .map(|(&y, &l)| voxel_likelihood(y, params, l))
        .sum())
}

/// `alpha * sum_t (1 - 2 delta(x_s, x_t))`.
pub fn potts_penalty(labels: &LabelMap, s: usize, nbh: &NeighborhoodSystem, alpha: f64) -> f64 {
    let xs = labels.get(s);
    let sum: f64 = nbh
        .neighbors(s)
        .iter()
        .map(|&t| if labels.get(t) == xs { -1.0 } else { 1.0 })
        .sum();
    alpha * sum
}

/// Relative frequencies of the most and second-most common label among the
/// neighbors of `s` (zeros for an empty clique).
pub fn label_frequencies(labels: &LabelMap, s: usize, nbh: &NeighborhoodSystem) -> (f64, f64) {
    let neighbors = nbh.neighbors(s);
    if neighbors.is_empty() {
        return (0.0, 0.0);
    }
    let mut counts = vec![0usize; labels.num_classes()];
    for &t in neighbors {
        counts[labels.get(t)] += 1;
    }
    counts.sort_unstable_by(|a, b| b.cmp(a));
    let n = neighbors.len() as f64;
    (counts[0] as f64 / n, counts[1] as f64 / n)
}

/// Adaptive weight: `2 alpha` when a single class dominates both the first- and
/// second-order cliques by more than `threshold`, `alpha` when only one of them
/// is dominated, else 0.
pub fn banerjee_alpha_s(labels: &LabelMap, s: usize, cliques: &Cliques, alpha: f64, threshold: f64) -> f64 {
    let (a1, b1) = label_frequencies(labels, s, &cliques.first);
    let (a2, b2) = label_frequencies(labels, s, &cliques.second);
    let dominant = [a1 - b1 > threshold, a2 - b2 > threshold];
    match dominant.iter().filter(|d| **d).count() {
        2 => 2.0 * alpha,
        1 => alpha,
        _ => 0.0,
    }
}

pub fn banerjee_penalty(
    labels: &LabelMap,
    s: usize,
    nbh: &NeighborhoodSystem,
    params: &ClassParams,
    alpha_s: f64,
) -> f64 {
    let neighbors = nbh.neighbors(s);
    if neighbors.is_empty() || alpha_s == 0.0 {
        return 0.0;
    }
    let xs = labels.get(s);
    let (mu_s, var_s) = (params.mean(xs), params.std(xs).powi(2));
    let sum: f64 = neighbors
        .iter()
        .map(|&t| {
            let xt = labels.get(t);
            let d = mu_s - params.mean(xt);
            d * d * (1.0 / var_s + 1.0 / params.std(xt).powi(2)) - 1.0
        })
        .sum();
    alpha_s / (2.0 * neighbors.len() as f64) * sum
}

/// Penalty `E(x_s)` of one voxel under the configured neighborhood term.
pub fn voxel_penalty(
    labels: &LabelMap,
    s: usize,
    cliques: &Cliques,
    cfg: &DiscreteNeighborhoodConfig,
    params: &ClassParams,
) -> f64 {
    match cfg.kind {
        PenaltyKind::Potts => potts_penalty(labels, s, &cliques.first, cfg.alpha),
        PenaltyKind::Banerjee => {
            let alpha_s = banerjee_alpha_s(labels, s, cliques, cfg.alpha, cfg.threshold);
            banerjee_penalty(labels, s, &cliques.first, params, alpha_s)
        }
    }
}

pub fn neighborhood_energy(
    labels: &LabelMap,
    cliques: &Cliques,
    cfg: &DiscreteNeighborhoodConfig,
    params: &ClassParams,
) -> f64 {
    (0..labels.len()).map(|s| voxel_penalty(labels, s, cliques, cfg, params)).sum()
}

/// MAP objective: likelihood energy plus neighborhood energy.
pub fn total_energy(
    img: &Image2D,
    labels: &LabelMap,
    params: &ClassParams,
    cliques: &Cliques,
    cfg: &DiscreteNeighborhoodConfig,
) -> Result<f64> {
    let likelihood = likelihood_energy(img, labels, params)?;
    Ok(likelihood + neighborhood_energy(labels, cliques, cfg, params))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    /// Threshold intensities at the `k / K` quantiles.
    Quantile,
    Random { seed: u64 },
    Labels(LabelMap),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmIcmConfig {
    pub num_classes: usize,
    pub max_em_iters: usize,
    pub max_icm_sweeps: usize,
    /// Stop when the relative energy change over one EM iteration falls below this.
    pub tolerance: f64,
    pub neighborhood: DiscreteNeighborhoodConfig,
    pub init: Init,
    /// Hold class parameters fixed (no M-step).
    pub fixed_params: Option<ClassParams>,
}

impl Default for EmIcmConfig {
    fn default() -> Self {
        Self {
            num_classes: 2,
            max_em_iters: 20,
            max_icm_sweeps: 10,
            tolerance: 1e-6,
            neighborhood: DiscreteNeighborhoodConfig { alpha: 0.1, ..DiscreteNeighborhoodConfig::default() },
            init: Init::Quantile,
            fixed_params: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Init,
    IcmSweep(usize),
    MStep,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub em_iter: usize,
    pub phase: Phase,
    pub energy: f64,
    /// Voxels relabeled during an ICM sweep.
    pub changed: usize,
    /// Classes left empty by the current labeling; their parameters were kept.
    pub empty_classes: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct EmIcmResult {
    pub labels: LabelMap,
    pub params: ClassParams,
    pub trace: Vec<TraceEntry>,
    pub converged: bool,
}

impl EmIcmResult {
    pub fn final_energy(&self) -> f64 {
        self.trace.last().map(|t| t.energy).unwrap_or(f64::NAN)
    }
}

fn quantile_labels(img: &Image2D, k: usize) -> Vec<usize> {
    let mut sorted = img.values().to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let thresholds: Vec<f64> = (1..k).map(|q| sorted[(q * n / k).min(n - 1)]).collect();
    img.values().iter().map(|v| thresholds.iter().filter(|t| v >= t).count()).collect()
}

/// Per-class mean and population standard deviation. Empty classes keep the
/// fallback parameters and are reported.
pub fn estimate_params(img: &Image2D, labels: &LabelMap, fallback: &ClassParams) -> (ClassParams, Vec<usize>) {
    let k = labels.num_classes();
    let mut sum = vec![0.0; k];
    let mut count = vec![0usize; k];
    for (&y, &l) in img.values().iter().zip(labels.labels()) {
        sum[l] += y;
        count[l] += 1;
    }
    let mut sq = vec![0.0; k];
    for (&y, &l) in img.values().iter().zip(labels.labels()) {
        let m = sum[l] / count[l] as f64;
        sq[l] += (y - m) * (y - m);
    }
    let mut means = Vec::with_capacity(k);
    let mut stds = Vec::with_capacity(k);
    let mut empty = Vec::new();
    for l in 0..k {
        if count[l] == 0 {
            empty.push(l);
            means.push(fallback.mean(l));
            stds.push(fallback.std(l));
        } else {
            means.push(sum[l] / count[l] as f64);
            stds.push((sq[l] / count[l] as f64).sqrt());
        }
    }
    let mut params = ClassParams::new(ParamKind::Discrete, means, stds).expect("k >= 2");
    for &l in &empty {
        params.degenerate[l] = true;
    }
    (params, empty)
}

fn initial_fallback(img: &Image2D, k: usize) -> ClassParams {
    let n = img.len() as f64;
    let mean = img.values().iter().sum::<f64>() / n;
    let std = (img.values().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
    let mut sorted = img.values().to_vec();
    sorted.sort_by(f64::total_cmp);
    let means = (0..k)
        .map(|q| sorted[(((2 * q + 1) * sorted.len()) / (2 * k)).min(sorted.len() - 1)])
        .collect();
    ClassParams::discrete(means, vec![std; k]).expect("k >= 2")
}

/// Voxels whose penalty can change when the label of `s` changes.
fn affected(s: usize, cliques: &Cliques, kind: PenaltyKind, out: &mut Vec<usize>) {
    out.clear();
    out.push(s);
    out.extend_from_slice(cliques.first.neighbors(s));
    if kind == PenaltyKind::Banerjee {
        out.extend_from_slice(cliques.second.neighbors(s));
    }
}

/// One raster-order ICM sweep. Each voxel takes the label minimizing the part
/// of the total energy that depends on it; it moves only on a strict decrease.
fn icm_sweep(
    img: &Image2D,
    labels: &mut LabelMap,
    params: &ClassParams,
    cliques: &Cliques,
    cfg: &DiscreteNeighborhoodConfig,
) -> usize {
    let mut changed = 0;
    let mut touched = Vec::new();
    for s in 0..labels.len() {
        affected(s, cliques, cfg.kind, &mut touched);
        let current = labels.get(s);
        let local = |labels: &mut LabelMap, l: usize| {
            labels.set(s, l);
            voxel_likelihood(img.values()[s], params, l)
                + touched.iter().map(|&t| voxel_penalty(labels, t, cliques, cfg, params)).sum::<f64>()
        };
        let current_cost = local(labels, current);
        let (mut best, mut best_cost) = (current, current_cost);
        for l in 0..labels.num_classes() {
            if l == current {
                continue;
            }
            let cost = local(labels, l);
            if cost < best_cost - 1e-12 * best_cost.abs().max(1.0) {
                best = l;
                best_cost = cost;
            }
        }
        labels.set(s, best);
        if best != current {
            changed += 1;
        }
    }
    changed
}

/// Alternates ICM sweeps (labels) with M-steps (class parameters).
///
/// Returned classes are sorted by ascending mean unless parameters are fixed.
pub fn em_icm_segment(img: &Image2D, cfg: &EmIcmConfig) -> Result<EmIcmResult> {
    if cfg.num_classes < 2 {
        return Err(Error::Config(format!("need at least 2 classes, got {}", cfg.num_classes)));
    }
    if !(cfg.tolerance > 0.0) {
        return Err(Error::Config("tolerance must be > 0".into()));
    }
    cfg.neighborhood.validate()?;
    let k = cfg.num_classes;
    let cliques = Cliques::new(img.height(), img.width())?;
    let mut labels = match &cfg.init {
        Init::Quantile => LabelMap::new(img.height(), img.width(), k, quantile_labels(img, k))?,
        Init::Random { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            let l = (0..img.len()).map(|_| rng.random_range(0..k)).collect();
            LabelMap::new(img.height(), img.width(), k, l)?
        }
        Init::Labels(l) => {
            if !l.same_shape_as(img) || l.num_classes() != k {
                return Err(Error::Shape("initial labels do not match the image / class count".into()));
            }
            l.clone()
        }
    };
    let (mut params, empty) = match &cfg.fixed_params {
        Some(p) => {
            if p.num_classes() != k {
                return Err(Error::Config(format!("fixed params have {} classes, expected {k}", p.num_classes())));
            }
            (p.clone(), Vec::new())
        }
        None => estimate_params(img, &labels, &initial_fallback(img, k)),
    };
    let nb = &cfg.neighborhood;
    let mut trace = vec![TraceEntry {
        em_iter: 0,
        phase: Phase::Init,
        energy: total_energy(img, &labels, &params, &cliques, nb)?,
        changed: 0,
        empty_classes: empty,
    }];
    let mut converged = false;
    for it in 0..cfg.max_em_iters {
        let start = trace.last().expect("init entry").energy;
        for sweep in 0..cfg.max_icm_sweeps {
            let changed = icm_sweep(img, &mut labels, &params, &cliques, nb);
            trace.push(TraceEntry {
                em_iter: it,
                phase: Phase::IcmSweep(sweep),
                energy: total_energy(img, &labels, &params, &cliques, nb)?,
                changed,
                empty_classes: Vec::new(),
            });
            if changed == 0 {
                break;
            }
        }
        if cfg.fixed_params.is_none() {
            let (next, empty) = estimate_params(img, &labels, &params);
            params = next;
            trace.push(TraceEntry {
                em_iter: it,
                phase: Phase::MStep,
                energy: total_energy(img, &labels, &params, &cliques, nb)?,
                changed: 0,
                empty_classes: empty,
            });
        }
        let end = trace.last().expect("entries").energy;
        if (start - end).abs() / start.abs().max(f64::MIN_POSITIVE) < cfg.tolerance {
            converged = true;
            break;
        }
    }
    if cfg.fixed_params.is_none() {
        let perm = params.canonical_permutation();
        labels = labels.permuted(&perm);
        params = params.permuted(&perm);
    }
    Ok(EmIcmResult { labels, params, trace, converged })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(h: usize, w: usize, labels: &[usize]) -> LabelMap {
        LabelMap::new(h, w, 2, labels.to_vec()).unwrap()
    }

    #[test]
    fn posterior_peak_and_one_sigma() {
        let p = ClassParams::discrete(vec![0.0, 2.0], vec![1.0, 1.0]).unwrap();
        assert!((class_posterior(0.0, &p, 0) - 0.398_942_280_401_432_7).abs() < 1e-15);
        assert!((class_posterior(3.0, &p, 1) - 0.241_970_724_519_143_37).abs() < 1e-15);
    }

    #[test]
    fn posterior_matches_high_precision_reference() {
        // Reference value computed with 50-digit arithmetic (mpmath).
        let p = ClassParams::discrete(vec![0.7, 0.1], vec![0.1, 0.1]).unwrap();
        let want = 0.001_338_302_257_648_853_6;
        assert!((class_posterior(0.3, &p, 0) - want).abs() / want < 1e-13);
    }

    #[test]
    fn likelihood_vanishes_on_perfect_fit_with_unit_sigma() {
        let img = Image2D::new(1, 2, vec![0.2, 0.8]).unwrap();
        let p = ClassParams::discrete(vec![0.2, 0.8], vec![1.0, 1.0]).unwrap();
        assert_eq!(likelihood_energy(&img, &grid(1, 2, &[0, 1]), &p).unwrap(), 0.0);
        let one = Image2D::new(1, 1, vec![1.2]).unwrap();
        let lab = LabelMap::new(1, 1, 2, vec![0]).unwrap();
        assert!((likelihood_energy(&one, &lab, &p).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn likelihood_rejects_missing_class() {
        let img = Image2D::filled(1, 2, 0.5);
        let labels = LabelMap::new(1, 2, 3, vec![0, 2]).unwrap();
        let p = ClassParams::discrete(vec![0.2, 0.8], vec![1.0, 1.0]).unwrap();
        assert!(matches!(likelihood_energy(&img, &labels, &p), Err(Error::MissingClass { class: 2, .. })));
    }

    #[test]
    fn potts_examples() {
        let cliques = Cliques::new(3, 3).unwrap();
        let same = grid(3, 3, &[0; 9]);
        assert_eq!(potts_penalty(&same, 4, &cliques.first, 1.0), -8.0);
        let differ = grid(3, 3, &[1, 1, 1, 1, 0, 1, 1, 1, 1]);
        assert_eq!(potts_penalty(&differ, 4, &cliques.first, 1.0), 8.0);
        let mixed = grid(3, 3, &[0, 0, 0, 0, 0, 1, 1, 1, 0]);
        // 5 same, 3 different.
        assert_eq!(potts_penalty(&mixed, 4, &cliques.first, 1.0), -2.0);
    }

    #[test]
    fn potts_is_invariant_under_label_permutation() {
        let cliques = Cliques::new(4, 4).unwrap();
        let labels = LabelMap::new(4, 4, 3, (0..16).map(|i| (i * 7) % 3).collect()).unwrap();
        let swapped = labels.permuted(&[2, 0, 1]);
        for s in 0..16 {
            assert_eq!(
                potts_penalty(&labels, s, &cliques.first, 0.7),
                potts_penalty(&swapped, s, &cliques.first, 0.7)
            );
        }
    }

    #[test]
    fn banerjee_weight_cases() {
        let cliques = Cliques::new(5, 5).unwrap();
        let homogeneous = grid(5, 5, &[0; 25]);
        assert_eq!(banerjee_alpha_s(&homogeneous, 12, &cliques, 1.5, 0.5), 3.0);

        // Checkerboard: both rings split evenly between the two classes.
        let checker: Vec<usize> = (0..25).map(|i| (i / 5 + i % 5) % 2).collect();
        let checker = grid(5, 5, &checker);
        assert_eq!(label_frequencies(&checker, 12, &cliques.first), (0.5, 0.5));
        assert_eq!(banerjee_alpha_s(&checker, 12, &cliques, 1.5, 0.5), 0.0);

        // Outer ring all class 0 (16/16); inner ring 5 x class 0 and 3 x class 1.
        let mut patch = vec![0usize; 25];
        for idx in [6, 7, 8] {
            patch[idx] = 1;
        }
        let patch = grid(5, 5, &patch);
        let (a1, b1) = label_frequencies(&patch, 12, &cliques.first);
        let (a2, b2) = label_frequencies(&patch, 12, &cliques.second);
        assert_eq!((a1 - b1, a2 - b2), (0.25, 1.0));
        assert_eq!(banerjee_alpha_s(&patch, 12, &cliques, 1.5, 0.5), 1.5);
    }

    #[test]
    fn banerjee_penalty_examples() {
        let cliques = Cliques::new(3, 3).unwrap();
        let p = ClassParams::discrete(vec![0.2, 0.8], vec![0.1, 0.1]).unwrap();
        let same = grid(3, 3, &[1; 9]);
        assert!((banerjee_penalty(&same, 4, &cliques.first, &p, 2.0) + 1.0).abs() < 1e-12);
        assert_eq!(banerjee_penalty(&same, 4, &cliques.first, &p, 0.0), 0.0);

        // 4 same / 4 different around a class-0 center.
        let mixed = grid(3, 3, &[0, 0, 0, 0, 0, 1, 1, 1, 1]);
        let mut want = 0.0;
        for t in [0, 1, 2, 3, 5, 6, 7, 8] {
            let xt = mixed.get(t);
            let d: f64 = 0.2 - p.mean(xt);
            want += d * d * (1.0 / 0.01 + 1.0 / p.std(xt).powi(2)) - 1.0;
        }
        want /= 16.0;
        let got = banerjee_penalty(&mixed, 4, &cliques.first, &p, 1.0);
        assert!((got - want).abs() < 1e-12);
        assert!((got - 17.5).abs() < 1e-9); // (4 * (0.36 * 200 - 1) - 4) / 16
    }

    #[test]
    fn banerjee_with_identical_classes_reduces_to_minus_half_alpha() {
        let cliques = Cliques::new(4, 4).unwrap();
        let p = ClassParams::discrete(vec![0.5, 0.5], vec![0.2, 0.2]).unwrap();
        let labels = grid(4, 4, &[0, 1, 1, 0, 1, 0, 0, 1, 1, 1, 0, 0, 0, 1, 0, 1]);
        for s in 0..16 {
            assert!((banerjee_penalty(&labels, s, &cliques.first, &p, 0.8) + 0.4).abs() < 1e-12);
        }
    }

    #[test]
    fn neighborhood_energy_examples() {
        let cliques = Cliques::new(3, 3).unwrap();
        let p = ClassParams::discrete(vec![0.2, 0.8], vec![1.0, 1.0]).unwrap();
        let uniform = grid(3, 3, &[0; 9]);
        let cfg = DiscreteNeighborhoodConfig::default();
        assert_eq!(neighborhood_energy(&uniform, &cliques, &cfg, &p), -(cliques.first.total_links() as f64));
        let off = DiscreteNeighborhoodConfig { alpha: 0.0, ..cfg };
        assert_eq!(neighborhood_energy(&uniform, &cliques, &off, &p), 0.0);
    }

    #[test]
    fn checkerboard_potts_matches_clique_enumeration() {
        let cliques = Cliques::new(4, 4).unwrap();
        let labels: Vec<usize> = (0..16).map(|i| (i / 4 + i % 4) % 2).collect();
        let labels = grid(4, 4, &labels);
        let p = ClassParams::discrete(vec![0.2, 0.8], vec![1.0, 1.0]).unwrap();
        let mut brute = 0.0;
        for s in 0..16isize {
            for t in 0..16isize {
                let (dy, dx) = ((s / 4 - t / 4).abs(), (s % 4 - t % 4).abs());
                if dy.max(dx) == 1 {
                    brute += if labels.get(s as usize) == labels.get(t as usize) { -1.0 } else { 1.0 };
                }
            }
        }
        let cfg = DiscreteNeighborhoodConfig::default();
        assert_eq!(neighborhood_energy(&labels, &cliques, &cfg, &p), brute);
    }

    #[test]
    fn total_energy_composes_components() {
        let img = Image2D::from_fn(4, 4, |r, c| ((r * 5 + c * 3) % 7) as f64 / 7.0);
        let labels = grid(4, 4, &[0, 1, 1, 0, 1, 0, 0, 1, 1, 1, 0, 0, 0, 1, 0, 1]);
        let p = ClassParams::discrete(vec![0.3, 0.6], vec![0.2, 0.1]).unwrap();
        let cliques = Cliques::new(4, 4).unwrap();
        for kind in [PenaltyKind::Potts, PenaltyKind::Banerjee] {
            let cfg = DiscreteNeighborhoodConfig { kind, alpha: 0.7, threshold: 0.2 };
            let total = total_energy(&img, &labels, &p, &cliques, &cfg).unwrap();
            let parts = likelihood_energy(&img, &labels, &p).unwrap()
                + neighborhood_energy(&labels, &cliques, &cfg, &p);
            assert_eq!(total, parts);
            let zero = DiscreteNeighborhoodConfig { alpha: 0.0, ..cfg };
            assert_eq!(
                total_energy(&img, &labels, &p, &cliques, &zero).unwrap(),
                likelihood_energy(&img, &labels, &p).unwrap()
            );
        }
    }

    #[test]
    fn em_icm_separates_noise_free_regions() {
        let img = Image2D::from_fn(8, 8, |_, c| if c < 3 { 0.2 } else { 0.8 });
        let res = em_icm_segment(&img, &EmIcmConfig::default()).unwrap();
        for s in 0..64 {
            assert_eq!(res.labels.get(s), usize::from(s % 8 >= 3));
        }
        assert!((res.params.mean(0) - 0.2).abs() < 1e-12);
    }

    #[test]
    fn zero_em_iterations_returns_initialization() {
        let img = Image2D::from_fn(4, 4, |r, c| (r * 4 + c) as f64 / 15.0);
        let cfg = EmIcmConfig { max_em_iters: 0, ..Default::default() };
        let res = em_icm_segment(&img, &cfg).unwrap();
        assert_eq!(res.labels.labels(), &quantile_labels(&img, 2)[..]);
        assert_eq!(res.trace.len(), 1);
    }

    #[test]
    fn empty_class_keeps_previous_params() {
        let img = Image2D::filled(2, 2, 0.4);
        let labels = LabelMap::uniform(2, 2, 2, 0).unwrap();
        let prev = ClassParams::discrete(vec![0.1, 0.9], vec![0.05, 0.07]).unwrap();
        let (p, empty) = estimate_params(&img, &labels, &prev);
        assert_eq!(empty, vec![1]);
        assert_eq!((p.mean(1), p.std(1)), (0.9, 0.07));
        assert!(p.degenerate[1]);
    }
}
