//! Training loops: unsupervised HMRF loss, supervised soft Dice, and
//! fine-tuning a pretrained unsupervised model.

use std::path::Path;
use std::time::Instant;

use diffcompute::Graph;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::eval::{dice, pooled_fuzzy_means};
use crate::fuzzy::{FuzzyNeighborhoodConfig, HmrfLossConfig, HmrfLossOp, LossBreakdown, LossWeights, NeighborhoodVariant, SoftDiceOp};
use crate::types::{Image2D, LabelMap};
use crate::unet::{batch_tensor, forward, predict, update_running_stats, ModelWeights, Provenance};
use crate::{Error, Result};

/// Channel treated as foreground by supervised training and evaluation.
pub const FOREGROUND: usize = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    UnsupervisedHmrf,
    SupervisedDice,
    Finetune,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum OptimizerConfig {
    Adam { beta1: f64, beta2: f64, eps: f64 },
    Sgd,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lambda_n: f64,
    pub neighborhood: NeighborhoodVariant,
    /// Alpha, threshold and source settings shared by every neighborhood variant.
    pub neighborhood_params: FuzzyNeighborhoodConfig,
    pub seed: u64,
    /// Write a checkpoint every this many epochs (0 disables).
    pub checkpoint_every: usize,
    pub optimizer: OptimizerConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 16,
            epochs: 50,
            lambda_n: 0.31,
            neighborhood: NeighborhoodVariant::Potts,
            neighborhood_params: FuzzyNeighborhoodConfig::default(),
            seed: 0,
            checkpoint_every: 0,
            optimizer: OptimizerConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be finite and >= 0, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        self.loss_config().validate()
    }

    pub fn loss_config(&self) -> HmrfLossConfig {
        HmrfLossConfig {
            neighborhood: self.neighborhood.config(self.neighborhood_params),
            weights: LossWeights::new(self.lambda_n.clamp(0.0, 1.0)).expect("clamped"),
        }
    }
}

/// Images with optional ground truth (foreground = label 1).
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub images: Vec<Image2D>,
    pub labels: Option<Vec<LabelMap>>,
}

impl Dataset {
    pub fn unlabeled(images: Vec<Image2D>) -> Self {
        Self { images, labels: None }
    }

    pub fn labeled(images: Vec<Image2D>, labels: Vec<LabelMap>) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::Shape(format!("{} images vs {} label maps", images.len(), labels.len())));
        }
        if let Some(i) = images.iter().zip(&labels).position(|(im, l)| !l.same_shape_as(im)) {
            return Err(Error::Shape(format!("label map {i} does not match its image")));
        }
        Ok(Self { images, labels: Some(labels) })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: self.labels.as_ref().map(|l| indices.iter().map(|&i| l[i].clone()).collect()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub data_loss: f64,
    pub neighborhood_loss: f64,
    pub val_dice: Option<f64>,
    pub wall_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub mode: TrainMode,
    pub seed: u64,
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub const CSV_HEADER: &'static str = "epoch,loss,data_loss,neighborhood_loss,val_dice";

    /// Loss trace without timing, so reruns produce identical bytes.
    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for r in &self.records {
            let dice = r.val_dice.map(|d| format!("{d:.10}")).unwrap_or_default();
            out.push_str(&format!(
                "{},{:.10e},{:.10e},{:.10e},{}\n",
                r.epoch, r.loss, r.data_loss, r.neighborhood_loss, dice
            ));
        }
        out
    }

    pub fn timing_csv(&self) -> String {
        let mut out = String::from("epoch,wall_seconds\n");
        for r in &self.records {
            out.push_str(&format!("{},{:.3}\n", r.epoch, r.wall_seconds));
        }
        out
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.records.last().map(|r| r.loss)
    }
}

struct Optimizer {
    cfg: OptimizerConfig,
    lr: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    fn new(cfg: OptimizerConfig, lr: f64, weights: &ModelWeights) -> Self {
        let zeros: Vec<Vec<f64>> = (0..weights.specs().len()).map(|i| vec![0.0; weights.tensor(i).len()]).collect();
        Self { cfg, lr, step: 0, m: zeros.clone(), v: zeros }
    }

    fn apply(&mut self, weights: &mut ModelWeights, grads: &[Option<Vec<f64>>]) {
        self.step += 1;
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let p = weights.tensor_mut(i);
            match self.cfg {
                OptimizerConfig::Sgd => {
                    for (p, g) in p.iter_mut().zip(g) {
                        *p = (*p as f64 - self.lr * g) as f32;
                    }
                }
                OptimizerConfig::Adam { beta1, beta2, eps } => {
                    let (c1, c2) = (1.0 - beta1.powi(self.step), 1.0 - beta2.powi(self.step));
                    let (m, v) = (&mut self.m[i], &mut self.v[i]);
                    for j in 0..p.len() {
                        m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                        v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                        let update = self.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
                        p[j] = (p[j] as f64 - update) as f32;
                    }
                }
            }
        }
    }
}

enum Objective<'a> {
    Hmrf(HmrfLossConfig),
    Dice(&'a [LabelMap]),
}

/// Forward, loss, backward and one optimizer update on a single batch.
fn train_step(
    weights: &mut ModelWeights,
    opt: &mut Optimizer,
    images: &[&Image2D],
    objective: &Objective,
    batch_indices: &[usize],
) -> Result<LossBreakdown> {
    let tensors = weights.to_tensors();
    let mut graph = Graph::new();
    let x = graph.input(batch_tensor(images)?);
    let net = forward(&mut graph, &weights.config, &tensors, x, true)?;
    let (loss, breakdown) = match objective {
        Objective::Hmrf(cfg) => {
            let op = HmrfLossOp::new(images.iter().map(|im| (*im).clone()).collect(), *cfg)?;
            let breakdown = op.breakdown(graph.value(net.probs))?;
            (graph.custom(Box::new(op), &[net.probs])?, breakdown)
        }
        Objective::Dice(labels) => {
            let truth: Vec<bool> = batch_indices.iter().flat_map(|&i| labels[i].labels().iter().map(|&l| l == FOREGROUND)).collect();
            let node = graph.custom(Box::new(SoftDiceOp::new(truth, FOREGROUND)), &[net.probs])?;
            let v = graph.value(node).item();
            (node, LossBreakdown { total: v, data: v, neighborhood: 0.0 })
        }
    };
    if !breakdown.total.is_finite() {
        return Ok(breakdown);
    }
    graph.backward(loss)?;
    let grads: Vec<Option<Vec<f64>>> =
        net.params.iter().map(|p| p.map(|id| graph.grad(id)).transpose()).collect::<std::result::Result<_, _>>()?;
    if grads.iter().flatten().flatten().any(|g| !g.is_finite()) {
        return Ok(LossBreakdown { total: f64::NAN, ..breakdown });
    }
    opt.apply(weights, &grads);
    update_running_stats(weights, &graph, &net.bn_sites);
    Ok(breakdown)
}

/// Mean Dice of the foreground channel at 0.5 over a labeled set.
fn validation_dice(weights: &ModelWeights, val: &Dataset, foreground: usize) -> Result<Option<f64>> {
    let Some(labels) = &val.labels else { return Ok(None) };
    if val.is_empty() {
        return Ok(None);
    }
    let confs = predict(weights, &val.images)?;
    let mut total = 0.0;
    for (c, truth) in confs.iter().zip(labels) {
        let pred: Vec<bool> = c.channel(foreground).iter().map(|&p| p >= 0.5).collect();
        let gt: Vec<bool> = truth.labels().iter().map(|&l| l == FOREGROUND).collect();
        total += dice(&pred, &gt)?;
    }
    Ok(Some(total / val.len() as f64))
}

fn run(
    mut weights: ModelWeights,
    data: &Dataset,
    cfg: &TrainConfig,
    objective: Objective,
    mode: TrainMode,
    validation: Option<&Dataset>,
    checkpoint_dir: Option<&Path>,
) -> Result<(ModelWeights, TrainLog)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InsufficientData("training set is empty".into()));
    }
    let mut log = TrainLog { mode, seed: cfg.seed, records: Vec::with_capacity(cfg.epochs) };
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate, &weights);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let last_good = weights.clone();
        order.shuffle(&mut rng);
        let mut sum = LossBreakdown::default();
        for batch in order.chunks(cfg.batch_size) {
            let images: Vec<&Image2D> = batch.iter().map(|&i| &data.images[i]).collect();
            let b = train_step(&mut weights, &mut opt, &images, &objective, batch)?;
            if !b.total.is_finite() {
                return Err(Error::Diverged { epoch, last_good: Box::new(last_good) });
            }
            let w = batch.len() as f64 / data.len() as f64;
            sum.total += w * b.total;
            sum.data += w * b.data;
            sum.neighborhood += w * b.neighborhood;
        }
        weights.epoch += 1;
        let foreground = match (&objective, validation) {
            (Objective::Hmrf(_), Some(val)) => foreground_channel(&weights, &val.images)?,
            _ => FOREGROUND,
        };
        let val_dice = match validation {
            Some(val) => validation_dice(&weights, val, foreground)?,
            None => None,
        };
        log.records.push(EpochRecord {
            epoch,
            loss: sum.total,
            data_loss: sum.data,
            neighborhood_loss: sum.neighborhood,
            val_dice,
            wall_seconds: start.elapsed().as_secs_f64(),
        });
        log::info!("epoch {epoch}: loss {:.6} (data {:.6}, neighborhood {:.6})", sum.total, sum.data, sum.neighborhood);
        if let Some(dir) = checkpoint_dir {
            if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 {
                weights.save(&dir.join(format!("epoch_{epoch:04}.ckpt")))?;
            }
        }
    }
    Ok((weights, log))
}

/// Output channel with the largest confidence-weighted intensity mean.
pub fn foreground_channel(weights: &ModelWeights, images: &[Image2D]) -> Result<usize> {
    let confs = predict(weights, images)?;
    let means = pooled_fuzzy_means(images, &confs)?;
    Ok(means.iter().enumerate().fold(0, |best, (l, &m)| if m > means[best] { l } else { best }))
}

/// Images used to decide the channel order after unsupervised training.
const CANONICAL_SAMPLE: usize = 64;

/// Minimizes the combined HMRF loss. Afterwards the output channels are
/// reordered by ascending pooled intensity mean, so channel 1 is the brighter
/// (foreground) class for binary models.
pub fn train_unsupervised(
    weights: ModelWeights,
    data: &Dataset,
    cfg: &TrainConfig,
    validation: Option<&Dataset>,
    checkpoint_dir: Option<&Path>,
) -> Result<(ModelWeights, TrainLog)> {
    let objective = Objective::Hmrf(cfg.loss_config());
    let (mut weights, log) = run(weights, data, cfg, objective, TrainMode::UnsupervisedHmrf, validation, checkpoint_dir)?;
    if cfg.epochs > 0 {
        let sample = &data.images[..data.len().min(CANONICAL_SAMPLE)];
        let confs = predict(&weights, sample)?;
        let means = pooled_fuzzy_means(sample, &confs)?;
        let mut order: Vec<usize> = (0..means.len()).collect();
        order.sort_by(|&a, &b| means[a].total_cmp(&means[b]).then(a.cmp(&b)));
        let mut perm = vec![0; means.len()];
        for (rank, &class) in order.iter().enumerate() {
            perm[class] = rank;
        }
        weights.permute_output_channels(&perm)?;
        weights.provenance = Provenance::Unsupervised;
    }
    Ok((weights, log))
}

fn require_labels(data: &Dataset) -> Result<&[LabelMap]> {
    data.labels.as_deref().ok_or_else(|| Error::InsufficientData("supervised training needs ground truth".into()))
}

/// Minimizes the batch soft Dice loss on the foreground channel.
pub fn train_supervised(
    weights: ModelWeights,
    data: &Dataset,
    cfg: &TrainConfig,
    validation: Option<&Dataset>,
    checkpoint_dir: Option<&Path>,
) -> Result<(ModelWeights, TrainLog)> {
    let labels = require_labels(data)?;
    let (mut weights, log) =
        run(weights, data, cfg, Objective::Dice(labels), TrainMode::SupervisedDice, validation, checkpoint_dir)?;
    if cfg.epochs > 0 {
        weights.provenance = Provenance::Supervised;
    }
    Ok((weights, log))
}

/// The `n` training images used for fine-tuning: a seeded shuffle of all
/// indices, truncated to `n`.
pub fn finetune_subset(len: usize, n: usize, seed: u64) -> Result<Vec<usize>> {
    if n == 0 || n > len {
        return Err(Error::InsufficientData(format!("cannot draw {n} labeled images from {len}")));
    }
    let mut idx: Vec<usize> = (0..len).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx.truncate(n);
    Ok(idx)
}

/// Supervised Dice training on `n` labeled images, starting from an
/// unsupervised checkpoint.
pub fn finetune(
    pretrained: ModelWeights,
    data: &Dataset,
    n: usize,
    cfg: &TrainConfig,
    validation: Option<&Dataset>,
    checkpoint_dir: Option<&Path>,
) -> Result<(ModelWeights, TrainLog)> {
    if pretrained.provenance != Provenance::Unsupervised {
        return Err(Error::Config(format!(
            "fine-tuning needs an unsupervised checkpoint, got {:?}",
            pretrained.provenance
        )));
    }
    let subset = data.subset(&finetune_subset(data.len(), n, cfg.seed)?);
    let labels = require_labels(&subset)?;
    let (mut weights, mut log) =
        run(pretrained, &subset, cfg, Objective::Dice(labels), TrainMode::Finetune, validation, checkpoint_dir)?;
    weights.provenance = Provenance::Finetuned;
    log.mode = TrainMode::Finetune;
    Ok((weights, log))
}

/// Draws a scratch subset with the same rule as [`finetune`].
pub fn labeled_subset(data: &Dataset, n: usize, seed: u64) -> Result<Dataset> {
    Ok(data.subset(&finetune_subset(data.len(), n, seed)?))
}
