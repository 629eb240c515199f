//! Fuzzy HMRF energies over softmax confidence maps, usable as training losses.
//!
//! Class parameters become confidence-weighted moments and each voxel gets a
//! confidence-mixed mean and standard deviation, so every energy term is a
//! smooth function of the confidences. [`HmrfLossOp`] and [`SoftDiceOp`] plug
//! the losses into a [`diffcompute::Graph`] with hand-derived gradients.

use diffcompute::{CustomOp, GraphError, Tensor};
use serde::{Deserialize, Serialize};

use crate::discrete::PenaltyKind;
use crate::neighborhood::{Cliques, NeighborhoodSystem};
use crate::types::{ClassParams, ConfidenceMap, Image2D, ParamKind, SIGMA_FLOOR};
use crate::{Error, Result};

/// Fraction of the voxel count below which a class's total confidence mass is
/// treated as empty.
pub const MASS_EPSILON: f64 = 1e-3;

/// Neutral mean substituted for a degenerate class.
const DEGENERATE_MEAN: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// Constant `alpha` at every voxel.
    Normal,
    /// Per-voxel weight from local clique standard deviations.
    Weighted,
}

/// Field whose clique standard deviation drives the weighted rule.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaSource {
    Intensity,
    Confidence,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FuzzyNeighborhoodConfig {
    pub kind: PenaltyKind,
    pub weighting: Weighting,
    pub alpha: f64,
    pub sigma_thresh: f64,
    pub sigma_source: SigmaSource,
    /// Constant added per clique pair in the Banerjee term (`+1` by default;
    /// `-1` matches the discrete penalty).
    pub banerjee_constant: f64,
}

impl Default for FuzzyNeighborhoodConfig {
    fn default() -> Self {
        Self {
            kind: PenaltyKind::Potts,
            weighting: Weighting::Normal,
            alpha: 1.0,
            sigma_thresh: 0.05,
            sigma_source: SigmaSource::Intensity,
            banerjee_constant: 1.0,
        }
    }
}

impl FuzzyNeighborhoodConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) {
            return Err(Error::Config(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if !(self.sigma_thresh > 0.0) {
            return Err(Error::Config(format!("sigma_thresh must be > 0, got {}", self.sigma_thresh)));
        }
        Ok(())
    }
}

/// The five neighborhood choices exposed on the command line.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum NeighborhoodVariant {
    None,
    Potts,
    Wpotts,
    Banerjee,
    Wbanerjee,
}

impl NeighborhoodVariant {
    pub const ALL: [NeighborhoodVariant; 5] = [Self::None, Self::Potts, Self::Wpotts, Self::Banerjee, Self::Wbanerjee];

    /// Applies the variant on top of `base` (alpha, thresholds, sources).
    pub fn config(self, base: FuzzyNeighborhoodConfig) -> Option<FuzzyNeighborhoodConfig> {
        let (kind, weighting) = match self {
            Self::None => return None,
            Self::Potts => (PenaltyKind::Potts, Weighting::Normal),
            Self::Wpotts => (PenaltyKind::Potts, Weighting::Weighted),
            Self::Banerjee => (PenaltyKind::Banerjee, Weighting::Normal),
            Self::Wbanerjee => (PenaltyKind::Banerjee, Weighting::Weighted),
        };
        Some(FuzzyNeighborhoodConfig { kind, weighting, ..base })
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Potts => "potts",
            Self::Wpotts => "wpotts",
            Self::Banerjee => "banerjee",
            Self::Wbanerjee => "wbanerjee",
        }
    }
}

/// `lambda_d = 1 - lambda_n` is structural: only `lambda_n` is stored.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    lambda_n: f64,
}

impl LossWeights {
    pub fn new(lambda_n: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&lambda_n) {
            return Err(Error::Config(format!("lambda_n must lie in [0, 1], got {lambda_n}")));
        }
        Ok(Self { lambda_n })
    }

    pub fn lambda_n(&self) -> f64 {
        self.lambda_n
    }

    pub fn lambda_d(&self) -> f64 {
        1.0 - self.lambda_n
    }
}

/// Per-voxel mixed parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct FuzzyFieldParams {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

fn check_shapes(img: &Image2D, c: &ConfidenceMap) -> Result<()> {
    if !c.same_shape_as(img) {
        return Err(Error::Shape(format!(
            "image {}x{} vs confidences {}x{}",
            img.height(),
            img.width(),
            c.height(),
            c.width()
        )));
    }
    Ok(())
}

/// Intermediate class moments, shared by the value and gradient paths.
struct ClassMoments {
    mass: Vec<f64>,
    means: Vec<f64>,
    vars: Vec<f64>,
    stds: Vec<f64>,
    degenerate: Vec<bool>,
}

fn class_moments(y: &[f64], c: &[f64], k: usize) -> ClassMoments {
    let n = y.len();
    let mut m = ClassMoments {
        mass: vec![0.0; k],
        means: vec![DEGENERATE_MEAN; k],
        vars: vec![0.0; k],
        stds: vec![SIGMA_FLOOR; k],
        degenerate: vec![false; k],
    };
    for l in 0..k {
        let cl = &c[l * n..(l + 1) * n];
        let mass: f64 = cl.iter().sum();
        m.mass[l] = mass;
        if mass < MASS_EPSILON * n as f64 {
            m.degenerate[l] = true;
            continue;
        }
        let mu = cl.iter().zip(y).map(|(c, y)| c * y).sum::<f64>() / mass;
        let var = cl.iter().zip(y).map(|(c, y)| c * (y - mu) * (y - mu)).sum::<f64>() / mass;
        m.means[l] = mu;
        m.vars[l] = var;
        m.stds[l] = var.sqrt().max(SIGMA_FLOOR);
    }
    m
}

/// Confidence-weighted class means and standard deviations.
///
/// Classes with total mass below `MASS_EPSILON * N` get `(0.5, SIGMA_FLOOR)`
/// and are flagged degenerate.
pub fn fuzzy_class_params(img: &Image2D, c: &ConfidenceMap) -> Result<ClassParams> {
    check_shapes(img, c)?;
    let m = class_moments(img.values(), c.data(), c.num_classes());
    let mut params = ClassParams::new(ParamKind::Fuzzy, m.means, m.stds)?;
    params.degenerate = m.degenerate;
    Ok(params)
}

fn mix(c: &[f64], n: usize, means: &[f64], stds: &[f64]) -> FuzzyFieldParams {
    let mut field = FuzzyFieldParams { means: vec![0.0; n], stds: vec![0.0; n] };
    for (l, (&mu, &sigma)) in means.iter().zip(stds).enumerate() {
        let cl = &c[l * n..(l + 1) * n];
        for s in 0..n {
            field.means[s] += cl[s] * mu;
            field.stds[s] += cl[s] * sigma;
        }
    }
    for v in &mut field.stds {
        *v = v.max(SIGMA_FLOOR);
    }
    field
}

pub fn voxel_fuzzy_params(c: &ConfidenceMap, params: &ClassParams) -> Result<FuzzyFieldParams> {
    if params.num_classes() != c.num_classes() {
        return Err(Error::MissingClass { class: c.num_classes() - 1, available: params.num_classes() });
    }
    Ok(mix(c.data(), c.num_voxels(), params.means(), params.stds()))
}

pub fn fuzzy_likelihood_energy(img: &Image2D, field: &FuzzyFieldParams) -> Result<f64> {
    if field.means.len() != img.len() {
        return Err(Error::Shape(format!("field has {} voxels, image {}", field.means.len(), img.len())));
    }
    Ok(img
        .values()
        .iter()
        .zip(field.means.iter().zip(&field.stds))
        .map(|(y, (m, v))| (y - m) * (y - m) / (2.0 * v * v) + v.ln())
        .sum())
}

fn potts_sum(c: &[f64], k: usize, nbh: &NeighborhoodSystem, alpha: &[f64]) -> f64 {
    let n = nbh.num_voxels();
    let mut total = 0.0;
    for s in 0..n {
        let neighbors = nbh.neighbors(s);
        if neighbors.is_empty() || alpha[s] == 0.0 {
            continue;
        }
        let mut sum = 0.0;
        for &t in neighbors {
            for l in 0..k {
                let d = c[l * n + s] - c[l * n + t];
                sum += d * d;
            }
        }
        total += alpha[s] / neighbors.len() as f64 * sum;
    }
    total
}

/// `sum_s alpha_s / |N_s| * sum_t ||c_s - c_t||^2`.
pub fn fuzzy_potts(c: &ConfidenceMap, nbh: &NeighborhoodSystem, alpha: &[f64]) -> f64 {
    potts_sum(c.data(), c.num_classes(), nbh, alpha)
}

fn banerjee_sum(field: &FuzzyFieldParams, nbh: &NeighborhoodSystem, alpha: &[f64], constant: f64) -> f64 {
    let mut total = 0.0;
    for s in 0..nbh.num_voxels() {
        let neighbors = nbh.neighbors(s);
        if neighbors.is_empty() || alpha[s] == 0.0 {
            continue;
        }
        let inv_s = 1.0 / (field.stds[s] * field.stds[s]);
        let sum: f64 = neighbors
            .iter()
            .map(|&t| {
                let d = field.means[s] - field.means[t];
                d * d * (inv_s + 1.0 / (field.stds[t] * field.stds[t])) + constant
            })
            .sum();
        total += alpha[s] / (2.0 * neighbors.len() as f64) * sum;
    }
    total
}

/// `sum_s alpha_s / (2|N_s|) * sum_t [(m_s - m_t)^2 (1/v_s^2 + 1/v_t^2) + 1]`.
pub fn fuzzy_banerjee(field: &FuzzyFieldParams, nbh: &NeighborhoodSystem, alpha: &[f64]) -> f64 {
    banerjee_sum(field, nbh, alpha, 1.0)
}

/// Population standard deviation of `values` over the clique of `s` (0 if empty).
fn clique_std(planes: &[&[f64]], s: usize, nbh: &NeighborhoodSystem) -> f64 {
    let neighbors = nbh.neighbors(s);
    if neighbors.is_empty() {
        return 0.0;
    }
    let n = neighbors.len() as f64;
    let mut var = 0.0;
    for plane in planes {
        let mean = neighbors.iter().map(|&t| plane[t]).sum::<f64>() / n;
        var += neighbors.iter().map(|&t| (plane[t] - mean).powi(2)).sum::<f64>() / n;
    }
    (var / planes.len() as f64).sqrt()
}

/// Per-voxel weight: `2 alpha` when both clique standard deviations are below
/// `sigma_thresh`, `alpha` when exactly one is, else 0.
///
/// `planes` holds one or more fields over the grid; with several (confidence
/// channels) their variances are averaged.
pub fn fuzzy_alpha_field(planes: &[&[f64]], cliques: &Cliques, alpha: f64, sigma_thresh: f64) -> Vec<f64> {
    (0..cliques.first.num_voxels())
        .map(|s| {
            let calm = [&cliques.first, &cliques.second]
                .iter()
                .filter(|nbh| clique_std(planes, s, nbh) < sigma_thresh)
                .count();
            alpha * calm as f64
        })
        .collect()
}

fn alpha_for(y: &[f64], c: &[f64], k: usize, cliques: &Cliques, cfg: &FuzzyNeighborhoodConfig) -> Vec<f64> {
    let n = y.len();
    match (cfg.weighting, cfg.sigma_source) {
        (Weighting::Normal, _) => vec![cfg.alpha; n],
        (Weighting::Weighted, SigmaSource::Intensity) => fuzzy_alpha_field(&[y], cliques, cfg.alpha, cfg.sigma_thresh),
        (Weighting::Weighted, SigmaSource::Confidence) => {
            let planes: Vec<&[f64]> = c.chunks(n).take(k).collect();
            fuzzy_alpha_field(&planes, cliques, cfg.alpha, cfg.sigma_thresh)
        }
    }
}

/// Neighborhood energy with the weight applied once, either the constant
/// `alpha` or the per-voxel weighted field.
pub fn fuzzy_neighborhood_energy(
    img: &Image2D,
    c: &ConfidenceMap,
    cliques: &Cliques,
    cfg: &FuzzyNeighborhoodConfig,
    field: &FuzzyFieldParams,
) -> Result<f64> {
    check_shapes(img, c)?;
    let alpha = alpha_for(img.values(), c.data(), c.num_classes(), cliques, cfg);
    Ok(match cfg.kind {
        PenaltyKind::Potts => potts_sum(c.data(), c.num_classes(), &cliques.first, &alpha),
        PenaltyKind::Banerjee => banerjee_sum(field, &cliques.first, &alpha, cfg.banerjee_constant),
    })
}

/// Loss components, each divided by the voxel count.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub data: f64,
    pub neighborhood: f64,
}

impl LossBreakdown {
    fn add_scaled(&mut self, other: &LossBreakdown, w: f64) {
        self.total += w * other.total;
        self.data += w * other.data;
        self.neighborhood += w * other.neighborhood;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HmrfLossConfig {
    /// `None` disables the neighborhood term.
    pub neighborhood: Option<FuzzyNeighborhoodConfig>,
    pub weights: LossWeights,
}

impl HmrfLossConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(nb) = &self.neighborhood {
            nb.validate()?;
        }
        LossWeights::new(self.weights.lambda_n).map(|_| ())
    }
}

/// Value and, optionally, gradient w.r.t. the class planes `c` of one image.
fn evaluate(
    y: &[f64],
    c: &[f64],
    k: usize,
    cliques: &Cliques,
    cfg: &HmrfLossConfig,
    want_grad: bool,
) -> (LossBreakdown, Option<Vec<f64>>) {
    let n = y.len();
    let (lambda_d, lambda_n) = (cfg.weights.lambda_d(), cfg.weights.lambda_n());
    debug_assert!((lambda_d + lambda_n - 1.0).abs() < 1e-15);
    let moments = class_moments(y, c, k);
    let field = mix(c, n, &moments.means, &moments.stds);
    let data_sum: f64 = (0..n)
        .map(|s| {
            let (m, v) = (field.means[s], field.stds[s]);
            (y[s] - m) * (y[s] - m) / (2.0 * v * v) + v.ln()
        })
        .sum();
    let (alpha, nb_sum) = match &cfg.neighborhood {
        Some(nb) => {
            let alpha = alpha_for(y, c, k, cliques, nb);
            let sum = match nb.kind {
                PenaltyKind::Potts => potts_sum(c, k, &cliques.first, &alpha),
                PenaltyKind::Banerjee => banerjee_sum(&field, &cliques.first, &alpha, nb.banerjee_constant),
            };
            (alpha, sum)
        }
        None => (Vec::new(), 0.0),
    };
    let nf = n as f64;
    let breakdown = LossBreakdown {
        total: lambda_d * data_sum / nf + lambda_n * nb_sum / nf,
        data: data_sum / nf,
        neighborhood: nb_sum / nf,
    };
    if !want_grad {
        return (breakdown, None);
    }

    let (wd, wn) = (lambda_d / nf, lambda_n / nf);
    let mut grad = vec![0.0; k * n];
    let mut gm = vec![0.0; n];
    let mut gv = vec![0.0; n];
    for s in 0..n {
        let (r, v) = (y[s] - field.means[s], field.stds[s]);
        gm[s] = -wd * r / (v * v);
        gv[s] = wd * (1.0 / v - r * r / (v * v * v));
    }
    if let Some(nb) = &cfg.neighborhood {
        let nbh = &cliques.first;
        match nb.kind {
            PenaltyKind::Potts => {
                for s in 0..n {
                    let neighbors = nbh.neighbors(s);
                    if neighbors.is_empty() || alpha[s] == 0.0 {
                        continue;
                    }
                    let w = 2.0 * wn * alpha[s] / neighbors.len() as f64;
                    for &t in neighbors {
                        for l in 0..k {
                            let d = w * (c[l * n + s] - c[l * n + t]);
                            grad[l * n + s] += d;
                            grad[l * n + t] -= d;
                        }
                    }
                }
            }
            PenaltyKind::Banerjee => {
                for s in 0..n {
                    let neighbors = nbh.neighbors(s);
                    if neighbors.is_empty() || alpha[s] == 0.0 {
                        continue;
                    }
                    let w = wn * alpha[s] / (2.0 * neighbors.len() as f64);
                    let vs = field.stds[s];
                    for &t in neighbors {
                        let vt = field.stds[t];
                        let d = field.means[s] - field.means[t];
                        let q = 1.0 / (vs * vs) + 1.0 / (vt * vt);
                        gm[s] += 2.0 * w * d * q;
                        gm[t] -= 2.0 * w * d * q;
                        gv[s] -= 2.0 * w * d * d / (vs * vs * vs);
                        gv[t] -= 2.0 * w * d * d / (vt * vt * vt);
                    }
                }
            }
        }
    }
    // Mixed voxel fields: m_s = sum_l c_ls mu_l, v_s = max(sum_l c_ls sigma_l, floor).
    let raw_v: Vec<f64> = (0..n).map(|s| (0..k).map(|l| c[l * n + s] * moments.stds[l]).sum()).collect();
    for s in 0..n {
        if raw_v[s] < SIGMA_FLOOR {
            gv[s] = 0.0;
        }
    }
    for l in 0..k {
        let (cl, gl) = (&c[l * n..(l + 1) * n], &mut grad[l * n..(l + 1) * n]);
        let (mu, sigma) = (moments.means[l], moments.stds[l]);
        for s in 0..n {
            gl[s] += gm[s] * mu + gv[s] * sigma;
        }
        if moments.degenerate[l] {
            continue;
        }
        let g_mu: f64 = (0..n).map(|s| gm[s] * cl[s]).sum();
        let g_sigma: f64 = (0..n).map(|s| gv[s] * cl[s]).sum();
        let sqrt_var = moments.vars[l].sqrt();
        let g_var = if sqrt_var > SIGMA_FLOOR { g_sigma / (2.0 * sqrt_var) } else { 0.0 };
        let mass = moments.mass[l];
        for s in 0..n {
            let r = y[s] - mu;
            gl[s] += g_mu * r / mass + g_var * (r * r - moments.vars[l]) / mass;
        }
    }
    (breakdown, Some(grad))
}

/// Combined loss `lambda_d * L_d + lambda_n * L_n` with both terms averaged
/// over voxels.
pub fn hmrf_loss(img: &Image2D, c: &ConfidenceMap, cliques: &Cliques, cfg: &HmrfLossConfig) -> Result<LossBreakdown> {
    check_shapes(img, c)?;
    if cliques.height() != img.height() || cliques.width() != img.width() {
        return Err(Error::Shape("neighborhood grid does not match the image".into()));
    }
    Ok(evaluate(img.values(), c.data(), c.num_classes(), cliques, cfg, false).0)
}

/// Gradient of [`hmrf_loss`] w.r.t. every confidence, laid out as class planes.
pub fn hmrf_loss_grad(
    img: &Image2D,
    c: &ConfidenceMap,
    cliques: &Cliques,
    cfg: &HmrfLossConfig,
) -> Result<(LossBreakdown, Vec<f64>)> {
    check_shapes(img, c)?;
    let (b, g) = evaluate(img.values(), c.data(), c.num_classes(), cliques, cfg, true);
    Ok((b, g.expect("gradient requested")))
}

/// Graph node computing the batch mean of the per-image HMRF loss from a
/// `[B, K, H, W]` confidence tensor.
pub struct HmrfLossOp {
    images: Vec<Image2D>,
    cliques: Cliques,
    cfg: HmrfLossConfig,
}

impl HmrfLossOp {
    pub fn new(images: Vec<Image2D>, cfg: HmrfLossConfig) -> Result<Self> {
        let first = images.first().ok_or_else(|| Error::InsufficientData("empty batch".into()))?;
        let (h, w) = (first.height(), first.width());
        if images.iter().any(|im| !im.same_shape(h, w)) {
            return Err(Error::Shape("images in a batch must share one size".into()));
        }
        cfg.validate()?;
        Ok(Self { cliques: Cliques::new(h, w)?, images, cfg })
    }

    /// Batch-mean loss components for confidences `c` shaped `[B, K, H, W]`.
    pub fn breakdown(&self, c: &Tensor) -> Result<LossBreakdown, GraphError> {
        self.run(c, false).map(|(b, _)| b)
    }

    fn run(&self, c: &Tensor, want_grad: bool) -> Result<(LossBreakdown, Option<Vec<f64>>), GraphError> {
        let [b, k, h, w] = c.dims4("hmrf_loss")?;
        if b != self.images.len() || !self.images[0].same_shape(h, w) || k < 2 {
            return Err(GraphError::shape(
                "hmrf_loss",
                format!("confidences {:?} vs {} images of {}x{}", c.shape(), self.images.len(), self.images[0].height(), self.images[0].width()),
            ));
        }
        let per = k * h * w;
        let mut total = LossBreakdown::default();
        let mut grad = want_grad.then(|| vec![0.0; b * per]);
        for (i, img) in self.images.iter().enumerate() {
            let ci = &c.data()[i * per..(i + 1) * per];
            let (part, g) = evaluate(img.values(), ci, k, &self.cliques, &self.cfg, want_grad);
            total.add_scaled(&part, 1.0 / b as f64);
            if let (Some(all), Some(g)) = (grad.as_mut(), g) {
                for (dst, src) in all[i * per..(i + 1) * per].iter_mut().zip(g) {
                    *dst = src / b as f64;
                }
            }
        }
        Ok((total, grad))
    }
}

impl CustomOp for HmrfLossOp {
    fn name(&self) -> &'static str {
        "hmrf_loss"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor, GraphError> {
        Ok(Tensor::scalar(self.run(inputs[0], false)?.0.total))
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_output: &Tensor) -> Vec<Option<Tensor>> {
        let g = grad_output.item();
        let (_, grad) = self.run(inputs[0], true).expect("forward succeeded on the same input");
        let data = grad.expect("gradient requested").into_iter().map(|v| v * g).collect();
        vec![Some(Tensor::new(inputs[0].shape(), data).expect("input shape"))]
    }
}

const DICE_SMOOTH: f64 = 1e-6;

/// `1 - (2 sum(p g) + eps) / (sum(p^2) + sum(g^2) + eps)`.
pub fn soft_dice_loss(p: &[f64], g: &[bool]) -> f64 {
    let (num, den) = dice_terms(p, g);
    1.0 - num / den
}

fn dice_terms(p: &[f64], g: &[bool]) -> (f64, f64) {
    let mut inter = 0.0;
    let mut den = DICE_SMOOTH;
    for (&pi, &gi) in p.iter().zip(g) {
        if gi {
            inter += pi;
            den += 1.0;
        }
        den += pi * pi;
    }
    (2.0 * inter + DICE_SMOOTH, den)
}

/// Soft Dice loss over a whole batch on one foreground channel of a
/// `[B, K, H, W]` confidence tensor.
pub struct SoftDiceOp {
    truth: Vec<bool>,
    foreground: usize,
}

impl SoftDiceOp {
    /// `truth` concatenates the foreground masks of the batch images.
    pub fn new(truth: Vec<bool>, foreground: usize) -> Self {
        Self { truth, foreground }
    }

    fn foreground_values(&self, c: &Tensor) -> Result<Vec<f64>, GraphError> {
        let [b, k, h, w] = c.dims4("soft_dice")?;
        if self.foreground >= k || b * h * w != self.truth.len() {
            return Err(GraphError::shape(
                "soft_dice",
                format!("confidences {:?} vs {} truth voxels, channel {}", c.shape(), self.truth.len(), self.foreground),
            ));
        }
        let hw = h * w;
        Ok((0..b)
            .flat_map(|i| {
                let off = (i * k + self.foreground) * hw;
                c.data()[off..off + hw].iter().copied()
            })
            .collect())
    }
}

impl CustomOp for SoftDiceOp {
    fn name(&self) -> &'static str {
        "soft_dice"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor, GraphError> {
        let p = self.foreground_values(inputs[0])?;
        Ok(Tensor::scalar(soft_dice_loss(&p, &self.truth)))
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_output: &Tensor) -> Vec<Option<Tensor>> {
        let c = inputs[0];
        let p = self.foreground_values(c).expect("forward succeeded on the same input");
        let (num, den) = dice_terms(&p, &self.truth);
        let g = grad_output.item();
        let [b, k, h, w] = c.dims4("soft_dice").expect("checked in forward");
        let hw = h * w;
        let mut grad = vec![0.0; c.len()];
        for i in 0..b {
            let off = (i * k + self.foreground) * hw;
            for j in 0..hw {
                let (pi, gi) = (p[i * hw + j], if self.truth[i * hw + j] { 1.0 } else { 0.0 });
                grad[off + j] = -g * (2.0 * gi * den - num * 2.0 * pi) / (den * den);
            }
        }
        vec![Some(Tensor::new(c.shape(), grad).expect("input shape"))]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{one_hot, LabelMap};

    fn conf(h: usize, w: usize, rows: &[[f64; 2]]) -> ConfidenceMap {
        let n = h * w;
        let mut data = vec![0.0; 2 * n];
        for (s, r) in rows.iter().enumerate() {
            data[s] = r[0];
            data[n + s] = r[1];
        }
        ConfidenceMap::new(h, w, 2, data).unwrap()
    }

    #[test]
    fn weighted_moments_example() {
        let img = Image2D::new(1, 2, vec![0.0, 1.0]).unwrap();
        let c = conf(1, 2, &[[0.8, 0.2], [0.2, 0.8]]);
        let p = fuzzy_class_params(&img, &c).unwrap();
        assert!((p.mean(0) - 0.2).abs() < 1e-12);
        assert!((p.std(0) - 0.4).abs() < 1e-12);
    }

    #[test]
    fn uniform_confidences_give_global_moments() {
        let img = Image2D::new(2, 2, vec![0.1, 0.4, 0.5, 1.0]).unwrap();
        let c = ConfidenceMap::constant(2, 2, &[0.5, 0.5]).unwrap();
        let p = fuzzy_class_params(&img, &c).unwrap();
        let mean = 0.5;
        let std = ((0.16 + 0.01 + 0.0 + 0.25) / 4.0f64).sqrt();
        for l in 0..2 {
            assert!((p.mean(l) - mean).abs() < 1e-12 && (p.std(l) - std).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_class_is_degenerate() {
        let img = Image2D::new(1, 2, vec![0.0, 1.0]).unwrap();
        let c = conf(1, 2, &[[1.0, 0.0], [1.0, 0.0]]);
        let p = fuzzy_class_params(&img, &c).unwrap();
        assert_eq!(p.degenerate, vec![false, true]);
        assert_eq!((p.mean(1), p.std(1)), (0.5, SIGMA_FLOOR));
    }

    #[test]
    fn mixed_voxel_params() {
        let c = conf(1, 1, &[[0.25, 0.75]]);
        let p = ClassParams::new(ParamKind::Fuzzy, vec![0.2, 0.8], vec![0.1, 0.2]).unwrap();
        let f = voxel_fuzzy_params(&c, &p).unwrap();
        assert!((f.means[0] - 0.65).abs() < 1e-12 && (f.stds[0] - 0.175).abs() < 1e-12);
    }

    #[test]
    fn likelihood_zero_when_field_fits_with_unit_sigma() {
        let img = Image2D::new(1, 3, vec![0.1, 0.2, 0.3]).unwrap();
        let field = FuzzyFieldParams { means: vec![0.1, 0.2, 0.3], stds: vec![1.0; 3] };
        assert_eq!(fuzzy_likelihood_energy(&img, &field).unwrap(), 0.0);
    }

    #[test]
    fn constant_confidences_have_zero_potts_and_half_n_banerjee() {
        let cliques = Cliques::new(4, 4).unwrap();
        let c = ConfidenceMap::constant(4, 4, &[0.3, 0.7]).unwrap();
        assert_eq!(fuzzy_potts(&c, &cliques.first, &[1.0; 16]), 0.0);
        let field = FuzzyFieldParams { means: vec![0.4; 16], stds: vec![0.1; 16] };
        assert!((fuzzy_banerjee(&field, &cliques.first, &[1.0; 16]) - 8.0).abs() < 1e-12);
        assert_eq!(fuzzy_banerjee(&field, &cliques.first, &[0.0; 16]), 0.0);
    }

    #[test]
    fn alpha_field_cases() {
        let cliques = Cliques::new(5, 5).unwrap();
        let flat = vec![0.5; 25];
        assert_eq!(fuzzy_alpha_field(&[&flat], &cliques, 0.7, 0.1)[12], 1.4);

        // Inner ring alternates 0.5 +- 0.12, outer ring alternates 0.5 +- 0.03.
        let mut patch = vec![0.5; 25];
        let mut flip = [1.0, 1.0];
        for s in 0..25 {
            let (dy, dx) = ((s / 5) as isize - 2, (s % 5) as isize - 2);
            let ring = dy.abs().max(dx.abs()) as usize;
            if ring > 0 {
                let amp = if ring == 1 { 0.12 } else { 0.03 };
                patch[s] = 0.5 + flip[ring - 1] * amp;
                flip[ring - 1] = -flip[ring - 1];
            }
        }
        assert!((clique_std(&[&patch], 12, &cliques.first) - 0.12).abs() < 1e-12);
        assert!((clique_std(&[&patch], 12, &cliques.second) - 0.03).abs() < 1e-12);
        assert_eq!(fuzzy_alpha_field(&[&patch], &cliques, 0.7, 0.1)[12], 0.7);

        let noisy: Vec<f64> = (0..25).map(|s| if (s / 5 + s % 5) % 2 == 0 { 0.0 } else { 1.0 }).collect();
        assert_eq!(fuzzy_alpha_field(&[&noisy], &cliques, 0.7, 0.1)[12], 0.0);
    }

    #[test]
    fn loss_weights_enforce_range() {
        assert!(LossWeights::new(1.2).is_err());
        let w = LossWeights::new(0.31).unwrap();
        assert!((w.lambda_d() - 0.69).abs() < 1e-15);
    }

    #[test]
    fn one_hot_likelihood_matches_discrete() {
        let img = Image2D::from_fn(3, 3, |r, c| ((r * 3 + c) * 7 % 9) as f64 / 8.0);
        let labels = LabelMap::new(3, 3, 2, vec![0, 1, 1, 0, 0, 1, 1, 0, 1]).unwrap();
        let c = one_hot(&labels);
        let p = fuzzy_class_params(&img, &c).unwrap();
        let f = voxel_fuzzy_params(&c, &p).unwrap();
        let mut discrete = p.clone();
        discrete.kind = ParamKind::Discrete;
        let want = crate::discrete::likelihood_energy(&img, &labels, &discrete).unwrap();
        assert!((fuzzy_likelihood_energy(&img, &f).unwrap() - want).abs() < 1e-9);
    }

    #[test]
    fn dice_loss_examples() {
        assert!(soft_dice_loss(&[1.0, 0.0, 1.0], &[true, false, true]).abs() < 1e-9);
        // p = 0.5 everywhere, g covers half of 4 voxels: 1 - 2 / (1 + 2).
        let got = soft_dice_loss(&[0.5; 4], &[true, true, false, false]);
        assert!((got - (1.0 - (2.0 + 1e-6) / (3.0 + 1e-6))).abs() < 1e-15);
    }
}
