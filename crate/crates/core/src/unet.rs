//! Configurable U-Net: encoder levels of conv / batch-norm / ReLU blocks with
//! max pooling, a mirrored decoder with 2x2 transposed convolutions and
//! concatenated skip connections, and a 1x1 softmax head.
//!
//! # Checkpoint format
//!
//! ```text
//! 8 bytes   magic "HMRFUNET"
//! 8 bytes   header length L (u64, little endian)
//! L bytes   UTF-8 JSON header
//! rest      tensor data, little-endian f32, laid out per the manifest
//! ```
//!
//! The header holds `format`, `config`, `provenance`, `epoch`, `seed` and a
//! `tensors` manifest of `{name, shape, offset}` entries, where `offset` is the
//! byte offset of the tensor within the data section.

use std::collections::HashMap;
use std::path::Path;

use diffcompute::{BatchNormMode, Graph, NodeId, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::types::{ConfidenceMap, Image2D};
use crate::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

const MAGIC: &[u8; 8] = b"HMRFUNET";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub levels: usize,
    pub convs_per_level: usize,
    pub base_kernels: usize,
    pub kernel_size: usize,
    pub output_classes: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self { levels: 2, convs_per_level: 2, base_kernels: 8, kernel_size: 3, output_classes: 2 }
    }
}

impl NetworkConfig {
    /// Full-size configuration: three levels of three convolutions, 64 base kernels.
    pub fn full_scale() -> Self {
        Self { levels: 3, convs_per_level: 3, base_kernels: 64, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.convs_per_level == 0 || self.base_kernels == 0 {
            return Err(Error::Config("levels, convs_per_level and base_kernels must be >= 1".into()));
        }
        if self.kernel_size.is_multiple_of(2) {
            return Err(Error::Config(format!("kernel_size must be odd, got {}", self.kernel_size)));
        }
        if self.output_classes < 2 {
            return Err(Error::Config(format!("output_classes must be >= 2, got {}", self.output_classes)));
        }
        Ok(())
    }

    /// Height and width must be divisible by `2^(levels - 1)`.
    pub fn check_input(&self, height: usize, width: usize) -> Result<()> {
        let m = 1 << (self.levels - 1);
        if !height.is_multiple_of(m) || !width.is_multiple_of(m) || height == 0 || width == 0 {
            return Err(Error::Shape(format!(
                "input {height}x{width} is not divisible by {m} ({} levels)",
                self.levels
            )));
        }
        Ok(())
    }

    fn channels(&self, level: usize) -> usize {
        self.base_kernels << level
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Initialized,
    Unsupervised,
    Supervised,
    Finetuned,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorRole {
    ConvWeight,
    Bias,
    Gamma,
    Beta,
    RunningMean,
    RunningVar,
}

impl TensorRole {
    pub fn trainable(self) -> bool {
        !matches!(self, TensorRole::RunningMean | TensorRole::RunningVar)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub role: TensorRole,
    /// Fan-in used by the initializer (conv weights only).
    pub fan_in: usize,
}

/// Encoder level `i` has `convs_per_level` blocks named `enc{i}.conv{j}` /
/// `enc{i}.bn{j}`; decoder level `i` adds `dec{i}.up` before its blocks.
pub fn layout(cfg: &NetworkConfig) -> Vec<TensorSpec> {
    let mut specs = Vec::new();
    let k = cfg.kernel_size;
    let block = |specs: &mut Vec<TensorSpec>, prefix: &str, j: usize, cin: usize, cout: usize| {
        specs.push(TensorSpec {
            name: format!("{prefix}.conv{j}.weight"),
            shape: vec![cout, cin, k, k],
            role: TensorRole::ConvWeight,
            fan_in: cin * k * k,
        });
        specs.push(TensorSpec { name: format!("{prefix}.conv{j}.bias"), shape: vec![cout], role: TensorRole::Bias, fan_in: 0 });
        for (suffix, role) in [
            ("gamma", TensorRole::Gamma),
            ("beta", TensorRole::Beta),
            ("running_mean", TensorRole::RunningMean),
            ("running_var", TensorRole::RunningVar),
        ] {
            specs.push(TensorSpec { name: format!("{prefix}.bn{j}.{suffix}"), shape: vec![cout], role, fan_in: 0 });
        }
    };
    for i in 0..cfg.levels {
        let prefix = format!("enc{i}");
        let cout = cfg.channels(i);
        for j in 0..cfg.convs_per_level {
            let cin = match (i, j) {
                (0, 0) => 1,
                (_, 0) => cfg.channels(i - 1),
                _ => cout,
            };
            block(&mut specs, &prefix, j, cin, cout);
        }
    }
    for i in (0..cfg.levels.saturating_sub(1)).rev() {
        let prefix = format!("dec{i}");
        let (cin, cout) = (cfg.channels(i + 1), cfg.channels(i));
        specs.push(TensorSpec {
            name: format!("{prefix}.up.weight"),
            shape: vec![cin, cout, 2, 2],
            role: TensorRole::ConvWeight,
            fan_in: cin,
        });
        specs.push(TensorSpec { name: format!("{prefix}.up.bias"), shape: vec![cout], role: TensorRole::Bias, fan_in: 0 });
        for j in 0..cfg.convs_per_level {
            let cin = if j == 0 { 2 * cout } else { cout };
            block(&mut specs, &prefix, j, cin, cout);
        }
    }
    let c0 = cfg.channels(0);
    specs.push(TensorSpec {
        name: "head.weight".into(),
        shape: vec![cfg.output_classes, c0, 1, 1],
        role: TensorRole::ConvWeight,
        fan_in: c0,
    });
    specs.push(TensorSpec { name: "head.bias".into(), shape: vec![cfg.output_classes], role: TensorRole::Bias, fan_in: 0 });
    specs
}

/// Number of trainable scalars (convolution weights and biases plus batch-norm
/// scale and shift).
pub fn parameter_count(cfg: &NetworkConfig) -> usize {
    layout(cfg).iter().filter(|s| s.role.trainable()).map(|s| s.shape.iter().product::<usize>()).sum()
}

/// Network parameters and batch-norm buffers, stored as `f32`, in [`layout`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights {
    pub config: NetworkConfig,
    pub provenance: Provenance,
    pub epoch: usize,
    pub seed: u64,
    specs: Vec<TensorSpec>,
    data: Vec<Vec<f32>>,
}

/// Builds a freshly initialized network: uniform weights in
/// `[-sqrt(6 / fan_in), sqrt(6 / fan_in)]`, zero biases, unit batch-norm scale.
pub fn build_unet(cfg: &NetworkConfig, seed: u64) -> Result<ModelWeights> {
    cfg.validate()?;
    let specs = layout(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = specs
        .iter()
        .map(|spec| {
            let n: usize = spec.shape.iter().product();
            match spec.role {
                TensorRole::ConvWeight => {
                    let bound = (6.0 / spec.fan_in as f64).sqrt();
                    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
                    (0..n).map(|_| dist.sample(&mut rng) as f32).collect()
                }
                TensorRole::Gamma | TensorRole::RunningVar => vec![1.0; n],
                TensorRole::Bias | TensorRole::Beta | TensorRole::RunningMean => vec![0.0; n],
            }
        })
        .collect();
    Ok(ModelWeights { config: *cfg, provenance: Provenance::Initialized, epoch: 0, seed, specs, data })
}

impl ModelWeights {
    pub fn specs(&self) -> &[TensorSpec] {
        &self.specs
    }

    pub fn tensor(&self, i: usize) -> &[f32] {
        &self.data[i]
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.specs.iter().position(|s| s.name == name)
    }

    pub fn parameter_count(&self) -> usize {
        parameter_count(&self.config)
    }

    /// All tensors widened to `f64`, in layout order.
    pub fn to_tensors(&self) -> Vec<Tensor> {
        self.specs
            .iter()
            .zip(&self.data)
            .map(|(s, d)| Tensor::new(&s.shape, d.iter().map(|&v| v as f64).collect()).expect("layout shape"))
            .collect()
    }

    /// Reorders the output channels: new channel `perm[old]` takes old channel `old`.
    pub fn permute_output_channels(&mut self, perm: &[usize]) -> Result<()> {
        let k = self.config.output_classes;
        let mut seen = vec![false; k];
        if perm.len() != k || perm.iter().any(|&p| p >= k || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Config(format!("{perm:?} is not a permutation of {k} channels")));
        }
        for name in ["head.weight", "head.bias"] {
            let i = self.index_of(name).expect("head tensors exist");
            let row = self.data[i].len() / k;
            let old = self.data[i].clone();
            for (from, &to) in perm.iter().enumerate() {
                self.data[i][to * row..(to + 1) * row].copy_from_slice(&old[from * row..(from + 1) * row]);
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        #[derive(Serialize)]
        struct Entry<'a> {
            name: &'a str,
            shape: &'a [usize],
            offset: usize,
        }
        let mut offset = 0;
        let entries: Vec<Entry> = self
            .specs
            .iter()
            .zip(&self.data)
            .map(|(s, d)| {
                let e = Entry { name: &s.name, shape: &s.shape, offset };
                offset += d.len() * 4;
                e
            })
            .collect();
        let header = serde_json::json!({
            "format": FORMAT_VERSION,
            "config": self.config,
            "provenance": self.provenance,
            "epoch": self.epoch,
            "seed": self.seed,
            "tensors": entries,
        });
        let header = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + header.len() + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for d in &self.data {
            for v in d {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        #[derive(Deserialize)]
        struct Entry {
            name: String,
            shape: Vec<usize>,
            offset: usize,
        }
        #[derive(Deserialize)]
        struct Header {
            format: u32,
            config: NetworkConfig,
            provenance: Provenance,
            epoch: usize,
            seed: u64,
            tensors: Vec<Entry>,
        }
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err("not a checkpoint (bad magic)".into());
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..16 + len).ok_or("truncated header")?;
        let header: Header = serde_json::from_slice(body).map_err(|e| format!("bad header: {e}"))?;
        if header.format != FORMAT_VERSION {
            return Err(format!("unsupported format version {}", header.format));
        }
        header.config.validate().map_err(|e| e.to_string())?;
        let specs = layout(&header.config);
        let payload = &bytes[16 + len..];
        let by_name: HashMap<&str, &Entry> = header.tensors.iter().map(|e| (e.name.as_str(), e)).collect();
        let mut data = Vec::with_capacity(specs.len());
        for spec in &specs {
            let e = by_name.get(spec.name.as_str()).ok_or_else(|| format!("missing tensor {}", spec.name))?;
            if e.shape != spec.shape {
                return Err(format!("tensor {} has shape {:?}, expected {:?}", spec.name, e.shape, spec.shape));
            }
            let n: usize = spec.shape.iter().product();
            let raw = payload.get(e.offset..e.offset + 4 * n).ok_or_else(|| format!("tensor {} out of bounds", spec.name))?;
            data.push(raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect());
        }
        Ok(Self {
            config: header.config,
            provenance: header.provenance,
            epoch: header.epoch,
            seed: header.seed,
            specs,
            data,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, bytes).map_err(|e| Error::file(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::file(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| Error::file(path, e))
    }
}

/// A batch-norm layer recorded during a training-mode forward pass.
#[derive(Clone, Copy, Debug)]
pub struct BnSite {
    pub node: NodeId,
    pub running_mean: usize,
    pub running_var: usize,
}

#[derive(Clone, Debug)]
pub struct NetOutput {
    /// Softmax confidences `[B, classes, H, W]`.
    pub probs: NodeId,
    /// Graph node of each tensor in layout order (`None` for running statistics).
    pub params: Vec<Option<NodeId>>,
    pub bn_sites: Vec<BnSite>,
}

/// Adds the network to `graph` with parameters taken from `tensors` (layout
/// order). `train` selects batch statistics over running statistics.
pub fn forward(graph: &mut Graph, cfg: &NetworkConfig, tensors: &[Tensor], input: NodeId, train: bool) -> Result<NetOutput> {
    let specs = layout(cfg);
    if tensors.len() != specs.len() {
        return Err(Error::Shape(format!("expected {} tensors, got {}", specs.len(), tensors.len())));
    }
    let [_, _, h, w] = graph.value(input).dims4("unet")?;
    cfg.check_input(h, w)?;
    let index: HashMap<&str, usize> = specs.iter().enumerate().map(|(i, s)| (s.name.as_str(), i)).collect();
    let params: Vec<Option<NodeId>> =
        specs.iter().zip(tensors).map(|(s, t)| s.role.trainable().then(|| graph.param(t.clone()))).collect();
    let node = |name: &str| params[index[name]].expect("trainable tensor");
    let mut bn_sites = Vec::new();

    let mut block = |graph: &mut Graph, x: NodeId, prefix: &str, j: usize| -> Result<NodeId> {
        let y = graph.conv2d(x, node(&format!("{prefix}.conv{j}.weight")), node(&format!("{prefix}.conv{j}.bias")))?;
        let (rm, rv) = (index[format!("{prefix}.bn{j}.running_mean").as_str()], index[format!("{prefix}.bn{j}.running_var").as_str()]);
        let mode = if train {
            BatchNormMode::Train
        } else {
            BatchNormMode::Eval { mean: tensors[rm].data(), var: tensors[rv].data() }
        };
        let y = graph.batch_norm(y, node(&format!("{prefix}.bn{j}.gamma")), node(&format!("{prefix}.bn{j}.beta")), mode, BN_EPS)?;
        if train {
            bn_sites.push(BnSite { node: y, running_mean: rm, running_var: rv });
        }
        Ok(graph.relu(y)?)
    };

    let mut skips = Vec::with_capacity(cfg.levels);
    let mut x = input;
    for i in 0..cfg.levels {
        if i > 0 {
            x = graph.max_pool2(x)?;
        }
        for j in 0..cfg.convs_per_level {
            x = block(graph, x, &format!("enc{i}"), j)?;
        }
        skips.push(x);
    }
    for i in (0..cfg.levels - 1).rev() {
        let prefix = format!("dec{i}");
        let up = graph.conv_transpose2x2(x, node(&format!("{prefix}.up.weight")), node(&format!("{prefix}.up.bias")))?;
        x = graph.concat(&[skips[i], up])?;
        for j in 0..cfg.convs_per_level {
            x = block(graph, x, &prefix, j)?;
        }
    }
    let logits = graph.conv2d(x, node("head.weight"), node("head.bias"))?;
    let probs = graph.softmax(logits)?;
    Ok(NetOutput { probs, params, bn_sites })
}

/// Exponential moving average of the batch statistics observed at `sites`
/// (unbiased variance).
pub fn update_running_stats(weights: &mut ModelWeights, graph: &Graph, sites: &[BnSite]) {
    for site in sites {
        let Some(stats) = graph.batch_stats(site.node) else { continue };
        let correction = if stats.count > 1 { stats.count as f64 / (stats.count - 1) as f64 } else { 1.0 };
        for (r, &m) in weights.data[site.running_mean].iter_mut().zip(&stats.mean) {
            *r = (BN_MOMENTUM * *r as f64 + (1.0 - BN_MOMENTUM) * m) as f32;
        }
        for (r, &v) in weights.data[site.running_var].iter_mut().zip(&stats.var) {
            *r = (BN_MOMENTUM * *r as f64 + (1.0 - BN_MOMENTUM) * v * correction) as f32;
        }
    }
}

/// Stacks same-sized images into a `[B, 1, H, W]` tensor.
pub fn batch_tensor(images: &[&Image2D]) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::InsufficientData("empty batch".into()))?;
    let (h, w) = (first.height(), first.width());
    let mut data = Vec::with_capacity(images.len() * h * w);
    for img in images {
        if !img.same_shape(h, w) {
            return Err(Error::Shape(format!("batch mixes {h}x{w} with {}x{}", img.height(), img.width())));
        }
        data.extend_from_slice(img.values());
    }
    Ok(Tensor::new(&[images.len(), 1, h, w], data)?)
}

fn split_confidences(t: &Tensor) -> Result<Vec<ConfidenceMap>> {
    let [b, k, h, w] = t.dims4("predict")?;
    let per = k * h * w;
    (0..b)
        .map(|i| ConfidenceMap::new_unchecked(h, w, k, t.data()[i * per..(i + 1) * per].to_vec()))
        .collect()
}

/// Eval-mode forward pass. Images are processed in chunks of `batch` but each
/// result depends only on its own image.
pub fn predict(weights: &ModelWeights, images: &[Image2D]) -> Result<Vec<ConfidenceMap>> {
    const CHUNK: usize = 16;
    let tensors = weights.to_tensors();
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(CHUNK) {
        let refs: Vec<&Image2D> = chunk.iter().collect();
        let mut graph = Graph::new();
        let x = graph.input(batch_tensor(&refs)?);
        let net = forward(&mut graph, &weights.config, &tensors, x, false)?;
        out.extend(split_confidences(graph.value(net.probs))?);
    }
    Ok(out)
}
