#![allow(dead_code)]

use diffcompute::{finite_difference_check, FdReport, Graph, GraphError, Tensor};
use hmrf_unet::discrete::{total_energy, DiscreteNeighborhoodConfig};
use hmrf_unet::fuzzy::{FuzzyNeighborhoodConfig, HmrfLossConfig, HmrfLossOp, LossWeights, NeighborhoodVariant};
use hmrf_unet::neighborhood::Cliques;
use hmrf_unet::types::{ClassParams, Image2D, LabelMap};
use hmrf_unet::unet::{batch_tensor, build_unet, forward, ModelWeights, NetworkConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Image2D {
    Image2D::new(h, w, (0..h * w).map(|_| rng.random::<f64>()).collect()).unwrap()
}

/// Two-level image: bright square on a dark background plus uniform noise.
pub fn blob_image(rng: &mut ChaCha8Rng, h: usize, w: usize, noise: f64) -> Image2D {
    let values = (0..h * w)
        .map(|s| {
            let (r, c) = (s / w, s % w);
            let inside = r >= h / 4 && r < 3 * h / 4 && c >= w / 4 && c < 3 * w / 4;
            let base = if inside { 0.7 } else { 0.3 };
            base + noise * (2.0 * rng.random::<f64>() - 1.0)
        })
        .collect();
    Image2D::new(h, w, values).unwrap()
}

pub fn random_labels(rng: &mut ChaCha8Rng, h: usize, w: usize, k: usize) -> LabelMap {
    LabelMap::new(h, w, k, (0..h * w).map(|_| rng.random_range(0..k)).collect()).unwrap()
}

/// Every binary labeling of a 3x3 grid, bit `s` of the index giving voxel `s`.
pub fn all_binary_3x3() -> impl Iterator<Item = LabelMap> {
    (0u32..512).map(|m| LabelMap::new(3, 3, 2, (0..9).map(|s| ((m >> s) & 1) as usize).collect()).unwrap())
}

/// Exact minimum of the discrete MAP objective over all 512 labelings.
pub fn brute_force_minimum(img: &Image2D, params: &ClassParams, cfg: &DiscreteNeighborhoodConfig) -> f64 {
    let cliques = Cliques::new(3, 3).unwrap();
    all_binary_3x3().map(|l| total_energy(img, &l, params, &cliques, cfg).unwrap()).fold(f64::INFINITY, f64::min)
}

/// Exact two-sided signed-rank p-value by enumerating all sign patterns of
/// the nonzero differences (no ties among |d| assumed).
pub fn wilcoxon_enumerated(a: &[f64], b: &[f64]) -> f64 {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|d| *d != 0.0).collect();
    let n = d.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| d[i].abs().total_cmp(&d[j].abs()));
    let mut rank = vec![0.0; n];
    for (r, &i) in order.iter().enumerate() {
        rank[i] = (r + 1) as f64;
    }
    let observed: f64 = (0..n).filter(|&i| d[i] > 0.0).map(|i| rank[i]).sum();
    let center = (n * (n + 1)) as f64 / 4.0;
    let dev = (observed - center).abs();
    let total = 1u64 << n;
    let extreme = (0..total)
        .filter(|m| {
            let w: f64 = (0..n).filter(|i| (m >> i) & 1 == 1).map(|i| rank[i]).sum();
            (w - center).abs() >= dev - 1e-9
        })
        .count();
    extreme as f64 / total as f64
}

fn to_graph_error(e: hmrf_unet::Error) -> GraphError {
    GraphError::shape("unet", e.to_string())
}

/// Loss configuration of one variant at `lambda_n = 0.5`.
pub fn loss_config(variant: NeighborhoodVariant, sigma_thresh: f64) -> HmrfLossConfig {
    let base = FuzzyNeighborhoodConfig { sigma_thresh, ..Default::default() };
    HmrfLossConfig { neighborhood: variant.config(base), weights: LossWeights::new(0.5).unwrap() }
}

/// Indices of the trainable tensors of `weights`.
pub fn trainable(weights: &ModelWeights) -> Vec<usize> {
    (0..weights.specs().len()).filter(|&i| weights.specs()[i].role.trainable()).collect()
}

/// HMRF loss through the U-Net as a function of the trainable tensors.
pub struct NetLoss {
    pub weights: ModelWeights,
    pub images: Vec<Image2D>,
    pub cfg: HmrfLossConfig,
}

impl NetLoss {
    pub fn new(net: &NetworkConfig, seed: u64, images: Vec<Image2D>, cfg: HmrfLossConfig) -> Self {
        Self { weights: build_unet(net, seed).unwrap(), images, cfg }
    }

    pub fn params(&self) -> Vec<Tensor> {
        let all = self.weights.to_tensors();
        trainable(&self.weights).into_iter().map(|i| all[i].clone()).collect()
    }

    pub fn build(&self, params: &[Tensor]) -> Result<(Graph, diffcompute::NodeId, Vec<diffcompute::NodeId>), GraphError> {
        let mut tensors = self.weights.to_tensors();
        for (slot, p) in trainable(&self.weights).into_iter().zip(params) {
            tensors[slot] = p.clone();
        }
        let mut graph = Graph::new();
        let refs: Vec<&Image2D> = self.images.iter().collect();
        let x = graph.input(batch_tensor(&refs).map_err(to_graph_error)?);
        let net = forward(&mut graph, &self.weights.config, &tensors, x, true).map_err(to_graph_error)?;
        let op = HmrfLossOp::new(self.images.clone(), self.cfg).map_err(to_graph_error)?;
        let loss = graph.custom(Box::new(op), &[net.probs])?;
        Ok((graph, loss, net.params.iter().flatten().copied().collect()))
    }

    /// Central-difference check on `count` seeded `(tensor, index)` probes.
    pub fn fd_check(&self, count: usize, seed: u64, step: f64, tol: f64) -> FdReport {
        let params = self.params();
        let mut r = rng(seed);
        let probes: Vec<(usize, usize)> = (0..count)
            .map(|i| {
                let p = i % params.len();
                (p, r.random_range(0..params[p].len()))
            })
            .collect();
        finite_difference_check(&params, &probes, step, tol, |p| self.build(p)).unwrap()
    }
}

/// The four neighborhood variants (every variant except `None`).
pub const NEIGHBORHOOD_VARIANTS: [NeighborhoodVariant; 4] =
    [NeighborhoodVariant::Potts, NeighborhoodVariant::Wpotts, NeighborhoodVariant::Banerjee, NeighborhoodVariant::Wbanerjee];
