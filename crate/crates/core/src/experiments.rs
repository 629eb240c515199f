//! Desk-scale studies: neighborhood-term comparison, `sigma_thresh` sweep and
//! the pre-training / fine-tuning comparison with a paired signed-rank test.

use serde::{Deserialize, Serialize};

use crate::data::synth::{thin_wall_mask, FoamGenConfig};
use crate::data::{datasets_by_split, synth_dataset, SynthDatasetConfig};
use crate::eval::{
    contrast_stat, default_threshold_grid, mean, threshold_sweep_set, wilcoxon_signed_rank, SweepMode, SweepResult,
};
use crate::fuzzy::NeighborhoodVariant;
use crate::train::{finetune, labeled_subset, train_supervised, train_unsupervised, Dataset, TrainConfig, FOREGROUND};
use crate::unet::{build_unet, predict, ModelWeights, NetworkConfig};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyConfig {
    pub foam: FoamGenConfig,
    pub train_images: usize,
    pub test_images: usize,
    pub network: NetworkConfig,
    /// Settings shared by every unsupervised run (variant, `lambda_n` and
    /// seed are overridden per run).
    pub unsupervised: TrainConfig,
    /// Settings shared by supervised and fine-tuning runs.
    pub supervised: TrainConfig,
    pub seeds: Vec<u64>,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            foam: FoamGenConfig::default(),
            train_images: 512,
            test_images: 64,
            network: NetworkConfig::default(),
            unsupervised: TrainConfig { epochs: 15, ..TrainConfig::default() },
            supervised: TrainConfig { epochs: 30, batch_size: 16, ..TrainConfig::default() },
            seeds: vec![0, 1, 2],
        }
    }
}

/// Train and test sets drawn from disjoint generator streams.
pub struct StudyData {
    pub train: Dataset,
    pub test: Dataset,
}

impl StudyConfig {
    pub fn data(&self) -> Result<StudyData> {
        let cfg = SynthDatasetConfig {
            foam: self.foam.clone(),
            train: self.train_images,
            val: 0,
            test: self.test_images,
            augmentations: 0,
        };
        let (samples, _) = synth_dataset(&cfg)?;
        let [train, _, test] = datasets_by_split(&samples)?;
        Ok(StudyData { train, test })
    }
}

/// Held-out scores of one model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelScore {
    pub sweep: SweepResult,
    /// Fraction of one-voxel-wide wall voxels predicted foreground at the swept threshold.
    pub thin_wall_recall: f64,
    pub contrast: Vec<f64>,
}

impl ModelScore {
    pub fn mean_dice(&self) -> f64 {
        self.sweep.mean_dice()
    }

    pub fn threshold(&self) -> f64 {
        self.sweep.thresholds[0]
    }
}

/// Per-dataset threshold sweep on the foreground channel plus thin-wall recall.
pub fn score_model(weights: &ModelWeights, test: &Dataset) -> Result<ModelScore> {
    let labels = test.labels.as_ref().ok_or_else(|| Error::InsufficientData("test set needs ground truth".into()))?;
    let confs = predict(weights, &test.images)?;
    let fg: Vec<&[f64]> = confs.iter().map(|c| c.channel(FOREGROUND)).collect();
    let truth: Vec<Vec<bool>> = labels.iter().map(|l| l.mask(FOREGROUND)).collect();
    let sweep = threshold_sweep_set(&fg, &truth, &default_threshold_grid(), SweepMode::PerDataset)?;
    let t = sweep.thresholds[0];
    let (mut hit, mut total) = (0usize, 0usize);
    for (p, l) in fg.iter().zip(labels) {
        for (&pv, thin) in p.iter().zip(thin_wall_mask(l)) {
            if thin {
                total += 1;
                hit += usize::from(pv >= t);
            }
        }
    }
    let thin_wall_recall = if total == 0 { f64::NAN } else { hit as f64 / total as f64 };
    Ok(ModelScore { sweep, thin_wall_recall, contrast: test.images.iter().map(contrast_stat).collect() })
}

/// Unsupervised model for one `(variant, lambda_n, sigma_thresh, seed)` setting.
pub fn train_hmrf(
    study: &StudyConfig,
    data: &StudyData,
    variant: NeighborhoodVariant,
    lambda_n: f64,
    sigma_thresh: f64,
    seed: u64,
) -> Result<ModelWeights> {
    let mut cfg = study.unsupervised.clone();
    cfg.neighborhood = variant;
    cfg.lambda_n = lambda_n;
    cfg.neighborhood_params.sigma_thresh = sigma_thresh;
    cfg.seed = seed;
    let weights = build_unet(&study.network, seed)?;
    Ok(train_unsupervised(weights, &data.train, &cfg, None, None)?.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeighborhoodRow {
    pub variant: NeighborhoodVariant,
    pub lambda_n: f64,
    pub seed: u64,
    pub dice: f64,
    pub threshold: f64,
}

/// Test Dice of every `(variant, lambda_n, seed)` combination.
pub fn neighborhood_study(
    study: &StudyConfig,
    data: &StudyData,
    variants: &[NeighborhoodVariant],
    lambdas: &[f64],
) -> Result<Vec<NeighborhoodRow>> {
    let sigma = study.unsupervised.neighborhood_params.sigma_thresh;
    let mut rows = Vec::new();
    for &variant in variants {
        for &lambda_n in lambdas {
            for &seed in &study.seeds {
                let w = train_hmrf(study, data, variant, lambda_n, sigma, seed)?;
                let s = score_model(&w, &data.test)?;
                rows.push(NeighborhoodRow { variant, lambda_n, seed, dice: s.mean_dice(), threshold: s.threshold() });
            }
        }
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SigmaRow {
    pub sigma_thresh: f64,
    pub seed: u64,
    pub dice: f64,
    pub thin_wall_recall: f64,
}

/// Weighted-Banerjee models across `sigma_thresh` values.
pub fn sigma_study(study: &StudyConfig, data: &StudyData, lambda_n: f64, thresholds: &[f64]) -> Result<Vec<SigmaRow>> {
    let mut rows = Vec::new();
    for &sigma_thresh in thresholds {
        for &seed in &study.seeds {
            let w = train_hmrf(study, data, NeighborhoodVariant::Wbanerjee, lambda_n, sigma_thresh, seed)?;
            let s = score_model(&w, &data.test)?;
            rows.push(SigmaRow { sigma_thresh, seed, dice: s.mean_dice(), thin_wall_recall: s.thin_wall_recall });
        }
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainRow {
    pub labels: usize,
    pub pretrained_dice: f64,
    pub scratch_dice: f64,
    /// Two-sided signed-rank p-value over paired per-image test Dice.
    pub p_value: f64,
}

/// Fine-tunes `pretrained` and trains a fresh network on the same `n` labeled
/// images for every `n`, then compares both on the test set.
pub fn pretraining_study(
    study: &StudyConfig,
    data: &StudyData,
    pretrained: &ModelWeights,
    label_counts: &[usize],
) -> Result<Vec<PretrainRow>> {
    let cfg = &study.supervised;
    let mut rows = Vec::new();
    for &n in label_counts {
        let (tuned, _) = finetune(pretrained.clone(), &data.train, n, cfg, None, None)?;
        let subset = labeled_subset(&data.train, n, cfg.seed)?;
        let (scratch, _) = train_supervised(build_unet(&study.network, cfg.seed)?, &subset, cfg, None, None)?;
        let a = score_model(&tuned, &data.test)?;
        let b = score_model(&scratch, &data.test)?;
        let test = wilcoxon_signed_rank(&a.sweep.dice, &b.sweep.dice)?;
        rows.push(PretrainRow { labels: n, pretrained_dice: a.mean_dice(), scratch_dice: b.mean_dice(), p_value: test.p_value });
    }
    Ok(rows)
}

/// Median of the per-seed values.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    match v.len() {
        0 => f64::NAN,
        n if n % 2 == 1 => v[n / 2],
        n => (v[n / 2 - 1] + v[n / 2]) / 2.0,
    }
}

pub fn neighborhood_csv(rows: &[NeighborhoodRow]) -> String {
    let mut out = String::from("variant,lambda_n,seed,dice,threshold\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{:.6},{:.2}\n", r.variant.name(), r.lambda_n, r.seed, r.dice, r.threshold));
    }
    out
}

pub fn sigma_csv(rows: &[SigmaRow]) -> String {
    let mut out = String::from("sigma_thresh,seed,dice,thin_wall_recall\n");
    for r in rows {
        out.push_str(&format!("{},{},{:.6},{:.6}\n", r.sigma_thresh, r.seed, r.dice, r.thin_wall_recall));
    }
    out
}

pub fn pretraining_csv(rows: &[PretrainRow]) -> String {
    let mut out = String::from("labels,pretrained_dice,scratch_dice,p_value\n");
    for r in rows {
        out.push_str(&format!("{},{:.6},{:.6},{:.3e}\n", r.labels, r.pretrained_dice, r.scratch_dice, r.p_value));
    }
    out
}

/// Median Dice per `(variant, lambda_n)`.
pub fn neighborhood_medians(rows: &[NeighborhoodRow]) -> Vec<(NeighborhoodVariant, f64, f64)> {
    let mut keys: Vec<(NeighborhoodVariant, f64)> = Vec::new();
    for r in rows {
        if !keys.iter().any(|k| k.0 == r.variant && k.1 == r.lambda_n) {
            keys.push((r.variant, r.lambda_n));
        }
    }
    keys.into_iter()
        .map(|(v, l)| {
            let d: Vec<f64> = rows.iter().filter(|r| r.variant == v && r.lambda_n == l).map(|r| r.dice).collect();
            (v, l, median(&d))
        })
        .collect()
}

/// Mean thin-wall recall per threshold.
pub fn sigma_means(rows: &[SigmaRow]) -> Vec<(f64, f64)> {
    let mut keys: Vec<f64> = Vec::new();
    for r in rows {
        if !keys.contains(&r.sigma_thresh) {
            keys.push(r.sigma_thresh);
        }
    }
    keys.into_iter()
        .map(|t| (t, mean(&rows.iter().filter(|r| r.sigma_thresh == t).map(|r| r.thin_wall_recall).collect::<Vec<_>>())))
        .collect()
}
