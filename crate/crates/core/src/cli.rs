//! The `hmrf` command line.
//!
//! Settings come from an optional TOML file, then `--set section.key=value`
//! overrides, then the dedicated flags of each subcommand. The resolved
//! settings are written to `resolved_config.json` in the output directory.
//!
//! Exit codes: 0 on success, 1 for invalid input or configuration, 2 when
//! training hits a non-finite loss.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::data::io::{list_slices, load_image, load_labels, load_slices, save_image, save_labels, save_raw, save_rgb};
use crate::data::split::{cuboid_split, Split, SplitConfig};
use crate::data::{extract_split_samples, load_split, synth_dataset, write_dataset, DatasetManifest, SynthDatasetConfig};
use crate::discrete::{em_icm_segment, EmIcmConfig};
use crate::eval::{
    default_threshold_grid, dice, render_panel, threshold_sweep_set, wilcoxon_signed_rank, EvalReport, SweepMode,
};
use crate::experiments::{
    neighborhood_csv, neighborhood_medians, neighborhood_study, pretraining_csv, pretraining_study, sigma_csv,
    sigma_means, sigma_study, train_hmrf, StudyConfig,
};
use crate::fuzzy::NeighborhoodVariant;
use crate::train::{finetune, labeled_subset, train_supervised, train_unsupervised, Dataset, TrainConfig, TrainLog, FOREGROUND};
use crate::types::{argmax_labels, ConfidenceMap, Image2D, LabelMap};
use crate::unet::{build_unet, predict, ModelWeights, NetworkConfig};
use crate::Error;

#[derive(Debug, Parser)]
#[command(name = "hmrf", version, about = "Unsupervised segmentation with HMRF losses on a U-Net")]
pub struct Cli {
    /// TOML settings file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, short, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Replaces every seed in the settings except the study seed list.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Setting override such as `train.lambda_n=0.56`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Min-max normalize loaded images.
    #[arg(long, global = true)]
    pub normalize: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic foam dataset with ground truth.
    GenData,
    /// Split a slice stack into train / val / test cuboids.
    Split {
        #[arg(long)]
        slices: PathBuf,
        /// Ground-truth label slices matching `--slices` file order.
        #[arg(long)]
        labels: Option<PathBuf>,
    },
    /// Unsupervised HMRF training.
    Train {
        /// Dataset directory or a directory of images.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        neighborhood: Option<NeighborhoodVariant>,
        #[arg(long)]
        lambda_n: Option<f64>,
        #[arg(long)]
        sigma_thresh: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Supervised fine-tuning of an unsupervised checkpoint.
    Finetune {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        labels_n: usize,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Supervised Dice training from random initialization.
    TrainSupervised {
        #[arg(long)]
        data: PathBuf,
        /// Use only this many labeled images.
        #[arg(long)]
        labels_n: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Label maps, confidences and per-image timing for a checkpoint.
    Segment {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Image file or directory.
        #[arg(long)]
        images: PathBuf,
    },
    /// Classical EM / ICM segmentation.
    BaselineEmicm {
        #[arg(long)]
        images: PathBuf,
        /// Ground-truth label directory for Dice.
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Dice with threshold sweep against ground truth.
    Evaluate {
        /// Ground-truth label directory.
        #[arg(long)]
        truth: PathBuf,
        /// Checkpoint file or directory of label maps.
        #[arg(long)]
        pred: PathBuf,
        /// Second prediction source for a paired signed-rank test.
        #[arg(long)]
        against: Option<PathBuf>,
        /// Image directory; required for checkpoints.
        #[arg(long)]
        images: Option<PathBuf>,
        /// One threshold per image instead of one per dataset.
        #[arg(long)]
        per_image: bool,
    },
    /// Canned experiment suites on synthetic data.
    Study {
        #[arg(value_enum)]
        kind: StudyKind,
        /// Labeled-image counts for the pretraining study.
        #[arg(long, value_delimiter = ',', default_values_t = [5, 10, 100])]
        labels: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_values_t = [0.0, 0.31, 0.56])]
        lambdas: Vec<f64>,
        #[arg(long, value_enum, value_delimiter = ',', default_values_t = NeighborhoodVariant::ALL)]
        variants: Vec<NeighborhoodVariant>,
        #[arg(long, value_delimiter = ',', default_values_t = [0.05, 0.1, 0.2])]
        sigmas: Vec<f64>,
        /// `lambda_n` of the sigma-threshold study.
        #[arg(long, default_value_t = 0.56)]
        lambda_n: f64,
        /// Unsupervised checkpoint for the pretraining study; trained when absent.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StudyKind {
    Neighborhood,
    Sigma,
    Pretraining,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub mode: SweepMode,
    /// Number of images rendered as PNG panels.
    pub panels: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { mode: SweepMode::PerDataset, panels: 4 }
    }
}

/// Every setting a subcommand may read.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Settings {
    pub data: SynthDatasetConfig,
    pub split: SplitConfig,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub supervised: TrainConfig,
    pub emicm: EmIcmConfig,
    pub eval: EvalConfig,
    pub study: StudyConfig,
}

impl Default for Settings {
    fn default() -> Self {
        let study = StudyConfig::default();
        Self {
            data: SynthDatasetConfig::default(),
            split: SplitConfig::default(),
            network: NetworkConfig::default(),
            train: TrainConfig::default(),
            supervised: study.supervised.clone(),
            emicm: EmIcmConfig::default(),
            eval: EvalConfig::default(),
            study,
        }
    }
}

impl Settings {
    /// File contents with dotted-key overrides applied.
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> anyhow::Result<Self> {
        let mut table = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                text.parse::<toml::Table>().with_context(|| format!("parsing {}", p.display()))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        toml::Value::Table(table).try_into().context("invalid settings")
    }

    fn set_seed(&mut self, seed: u64) {
        self.data.foam.seed = seed;
        self.split.seed = seed;
        self.train.seed = seed;
        self.supervised.seed = seed;
        self.study.foam.seed = seed;
        self.study.unsupervised.seed = seed;
        self.study.supervised.seed = seed;
    }
}

fn apply_override(table: &mut toml::Table, spec: &str) -> anyhow::Result<()> {
    let (key, raw) = spec.split_once('=').ok_or_else(|| anyhow!("override {spec:?} is not KEY=VALUE"))?;
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    let (last, path) = parts.split_last().expect("split yields one part");
    let mut cur = table;
    for p in path {
        cur = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| anyhow!("override {key:?}: {p:?} is not a section"))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

#[derive(Serialize)]
struct Snapshot<'a> {
    command: &'a str,
    out: &'a Path,
    seed: Option<u64>,
    overrides: &'a [String],
    settings: &'a Settings,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    flags: BTreeMap<&'static str, serde_json::Value>,
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> anyhow::Result<()> {
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn create_dir(path: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

fn stem(path: &Path) -> String {
    path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string()
}

/// Image files of a file or directory argument.
fn image_paths(path: &Path) -> anyhow::Result<Vec<PathBuf>> {
    let paths = if path.is_dir() { list_slices(path)? } else { vec![path.to_path_buf()] };
    if paths.is_empty() {
        bail!("no images found in {}", path.display());
    }
    Ok(paths)
}

fn load_named(path: &Path, normalize: bool) -> anyhow::Result<(Vec<String>, Vec<Image2D>)> {
    let paths = image_paths(path)?;
    let images = paths.iter().map(|p| load_image(p, normalize)).collect::<crate::Result<Vec<_>>>()?;
    Ok((paths.iter().map(|p| stem(p)).collect(), images))
}

/// A split of a dataset directory, or every image of a plain directory as
/// unlabeled training data.
fn load_dataset(dir: &Path, split: Split, normalize: bool) -> anyhow::Result<Dataset> {
    if dir.join("manifest.json").exists() {
        Ok(load_split(dir, split)?.1)
    } else if split == Split::Train {
        Ok(Dataset::unlabeled(load_slices(dir, normalize)?))
    } else {
        Ok(Dataset::unlabeled(Vec::new()))
    }
}

fn validation_set(dir: &Path) -> anyhow::Result<Option<Dataset>> {
    let val = load_dataset(dir, Split::Val, false)?;
    Ok((!val.is_empty() && val.labels.is_some()).then_some(val))
}

fn write_training(out: &Path, weights: &ModelWeights, log: &TrainLog) -> anyhow::Result<()> {
    weights.save(&out.join("model.ckpt"))?;
    write_file(&out.join("train_log.csv"), log.to_csv())?;
    write_file(&out.join("timing.csv"), log.timing_csv())
}

/// Saves the last finite weights before passing a divergence on.
fn keep_last_good<T>(out: &Path, result: crate::Result<T>) -> anyhow::Result<T> {
    match result {
        Err(Error::Diverged { epoch, last_good }) => {
            let path = out.join("last_good.ckpt");
            last_good.save(&path)?;
            log::error!("non-finite loss in epoch {epoch}; last finite weights in {}", path.display());
            Err(Error::Diverged { epoch, last_good }.into())
        }
        other => Ok(other?),
    }
}

/// Foreground-channel maps of either a checkpoint or a label directory, in `names` order.
fn foreground_maps(source: &Path, names: &[String], images: Option<&[Image2D]>) -> anyhow::Result<Vec<Vec<f64>>> {
    if source.is_dir() {
        names
            .iter()
            .map(|n| {
                let l = load_labels(&source.join(format!("{n}.png")), 2)?;
                Ok(l.mask(FOREGROUND).into_iter().map(f64::from).collect())
            })
            .collect()
    } else {
        let images = images.ok_or_else(|| anyhow!("--images is required to evaluate a checkpoint"))?;
        let weights = ModelWeights::load(source)?;
        Ok(predict(&weights, images)?.iter().map(|c| c.channel(FOREGROUND).to_vec()).collect())
    }
}

fn study_seeds(settings: &Settings) -> anyhow::Result<()> {
    if settings.study.seeds.is_empty() {
        bail!("study.seeds is empty");
    }
    Ok(())
}

impl Cli {
    pub fn run(self) -> anyhow::Result<()> {
        let mut settings = Settings::resolve(self.config.as_deref(), &self.overrides)?;
        if let Some(seed) = self.seed {
            settings.set_seed(seed);
        }
        let mut flags = BTreeMap::new();
        let name = match &self.command {
            Command::GenData => "gen-data",
            Command::Split { .. } => "split",
            Command::Train { neighborhood, lambda_n, sigma_thresh, epochs, .. } => {
                if let Some(v) = neighborhood {
                    settings.train.neighborhood = *v;
                }
                if let Some(l) = lambda_n {
                    settings.train.lambda_n = *l;
                }
                if let Some(s) = sigma_thresh {
                    settings.train.neighborhood_params.sigma_thresh = *s;
                }
                if let Some(e) = epochs {
                    settings.train.epochs = *e;
                }
                "train"
            }
            Command::Finetune { labels_n, epochs, .. } => {
                flags.insert("labels_n", (*labels_n).into());
                if let Some(e) = epochs {
                    settings.supervised.epochs = *e;
                }
                "finetune"
            }
            Command::TrainSupervised { labels_n, epochs, .. } => {
                if let Some(n) = labels_n {
                    flags.insert("labels_n", (*n).into());
                }
                if let Some(e) = epochs {
                    settings.supervised.epochs = *e;
                }
                "train-supervised"
            }
            Command::Segment { .. } => "segment",
            Command::BaselineEmicm { .. } => "baseline-emicm",
            Command::Evaluate { per_image, .. } => {
                if *per_image {
                    settings.eval.mode = SweepMode::PerImage;
                }
                "evaluate"
            }
            Command::Study { kind, .. } => {
                flags.insert("kind", serde_json::to_value(kind)?);
                "study"
            }
        };
        settings.train.validate()?;
        settings.supervised.validate()?;
        settings.network.validate()?;

        let out = self.out.as_path();
        create_dir(out)?;
        let snapshot = Snapshot { command: name, out, seed: self.seed, overrides: &self.overrides, settings: &settings, flags };
        write_file(&out.join("resolved_config.json"), serde_json::to_string_pretty(&snapshot)?)?;

        match self.command {
            Command::GenData => gen_data(&settings, out),
            Command::Split { slices, labels } => split(&settings, out, &slices, labels.as_deref(), self.normalize),
            Command::Train { data, .. } => {
                let train = load_dataset(&data, Split::Train, self.normalize)?;
                let val = validation_set(&data)?;
                let ckpt_dir = out.join("checkpoints");
                if settings.train.checkpoint_every > 0 {
                    create_dir(&ckpt_dir)?;
                }
                let weights = build_unet(&settings.network, settings.train.seed)?;
                let result = train_unsupervised(weights, &train, &settings.train, val.as_ref(), Some(&ckpt_dir));
                let (weights, log) = keep_last_good(out, result)?;
                write_training(out, &weights, &log)
            }
            Command::Finetune { data, checkpoint, labels_n, .. } => {
                let train = load_dataset(&data, Split::Train, false)?;
                let val = validation_set(&data)?;
                let pretrained = ModelWeights::load(&checkpoint)?;
                let result = finetune(pretrained, &train, labels_n, &settings.supervised, val.as_ref(), None);
                let (weights, log) = keep_last_good(out, result)?;
                write_training(out, &weights, &log)
            }
            Command::TrainSupervised { data, labels_n, .. } => {
                let mut train = load_dataset(&data, Split::Train, false)?;
                if let Some(n) = labels_n {
                    train = labeled_subset(&train, n, settings.supervised.seed)?;
                }
                let val = validation_set(&data)?;
                let weights = build_unet(&settings.network, settings.supervised.seed)?;
                let result = train_supervised(weights, &train, &settings.supervised, val.as_ref(), None);
                let (weights, log) = keep_last_good(out, result)?;
                write_training(out, &weights, &log)
            }
            Command::Segment { checkpoint, images } => segment(out, &checkpoint, &images, self.normalize),
            Command::BaselineEmicm { images, truth } => {
                baseline(&settings.emicm, out, &images, truth.as_deref(), self.normalize)
            }
            Command::Evaluate { truth, pred, against, images, .. } => {
                evaluate(&settings.eval, out, &truth, &pred, against.as_deref(), images.as_deref(), self.normalize)
            }
            Command::Study { kind, labels, lambdas, variants, sigmas, lambda_n, checkpoint } => {
                study_seeds(&settings)?;
                let study = &settings.study;
                let data = study.data()?;
                match kind {
                    StudyKind::Neighborhood => {
                        let rows = neighborhood_study(study, &data, &variants, &lambdas)?;
                        write_file(&out.join("neighborhood.csv"), neighborhood_csv(&rows))?;
                        let medians: Vec<_> = neighborhood_medians(&rows)
                            .into_iter()
                            .map(|(v, l, d)| serde_json::json!({"variant": v, "lambda_n": l, "median_dice": d}))
                            .collect();
                        write_file(&out.join("neighborhood_summary.json"), serde_json::to_string_pretty(&medians)?)
                    }
                    StudyKind::Sigma => {
                        let rows = sigma_study(study, &data, lambda_n, &sigmas)?;
                        write_file(&out.join("sigma.csv"), sigma_csv(&rows))?;
                        let means: Vec<_> = sigma_means(&rows)
                            .into_iter()
                            .map(|(t, r)| serde_json::json!({"sigma_thresh": t, "mean_thin_wall_recall": r}))
                            .collect();
                        write_file(&out.join("sigma_summary.json"), serde_json::to_string_pretty(&means)?)
                    }
                    StudyKind::Pretraining => {
                        let pretrained = match checkpoint {
                            Some(p) => ModelWeights::load(&p)?,
                            None => {
                                let u = &study.unsupervised;
                                let seed = study.seeds[0];
                                train_hmrf(study, &data, u.neighborhood, u.lambda_n, u.neighborhood_params.sigma_thresh, seed)?
                            }
                        };
                        let rows = pretraining_study(study, &data, &pretrained, &labels)?;
                        write_file(&out.join("pretraining.csv"), pretraining_csv(&rows))
                    }
                }
            }
        }
    }
}

fn gen_data(settings: &Settings, out: &Path) -> anyhow::Result<()> {
    let (samples, manifest) = synth_dataset(&settings.data)?;
    write_dataset(out, &samples, &manifest)?;
    log::info!("wrote {} samples to {}", samples.len(), out.display());
    Ok(())
}

fn split(settings: &Settings, out: &Path, slices: &Path, labels: Option<&Path>, normalize: bool) -> anyhow::Result<()> {
    let stack = load_slices(slices, normalize)?;
    let first = stack.first().ok_or_else(|| anyhow!("no slices in {}", slices.display()))?;
    let (h, w) = (first.height(), first.width());
    if let Some(bad) = stack.iter().position(|s| !s.same_shape(h, w)) {
        bail!("slice {bad} is not {h}x{w}");
    }
    let label_stack = labels
        .map(|dir| list_slices(dir)?.iter().map(|p| load_labels(p, 2)).collect::<crate::Result<Vec<LabelMap>>>())
        .transpose()?;
    let plan = cuboid_split(stack.len(), h, w, &settings.split)?;
    let samples = extract_split_samples(&stack, label_stack.as_deref(), &plan, settings.split.seed)?;
    let manifest = DatasetManifest {
        generator: None,
        split_plan: Some(plan.clone()),
        samples: samples.iter().map(|s| s.meta.clone()).collect(),
    };
    write_dataset(out, &samples, &manifest)?;
    let full = out.join("fullsize_test");
    create_dir(&full.join("images"))?;
    if label_stack.is_some() {
        create_dir(&full.join("labels"))?;
    }
    for &s in &plan.fullsize_test {
        save_image(&full.join("images").join(format!("s{s:05}.png")), &stack[s])?;
        if let Some(l) = &label_stack {
            save_labels(&full.join("labels").join(format!("s{s:05}.png")), &l[s])?;
        }
    }
    for s in Split::ALL {
        log::info!("{}: {} samples", s.name(), plan.sample_count(s));
    }
    log::info!("full-size test: {} slices", plan.fullsize_test.len());
    Ok(())
}

fn segment(out: &Path, checkpoint: &Path, images: &Path, normalize: bool) -> anyhow::Result<()> {
    let weights = ModelWeights::load(checkpoint)?;
    let (names, images) = load_named(images, normalize)?;
    let (labels_dir, conf_dir) = (out.join("labels"), out.join("confidence"));
    create_dir(&labels_dir)?;
    create_dir(&conf_dir)?;
    let mut timing = String::from("image,milliseconds\n");
    let mut total = 0.0;
    for (name, img) in names.iter().zip(images) {
        let start = Instant::now();
        let conf: ConfidenceMap = predict(&weights, std::slice::from_ref(&img))?.remove(0);
        let ms = start.elapsed().as_secs_f64() * 1e3;
        total += ms;
        timing.push_str(&format!("{name},{ms:.3}\n"));
        save_labels(&labels_dir.join(format!("{name}.png")), &argmax_labels(&conf))?;
        for l in 0..conf.num_classes() {
            let plane = Image2D::new(conf.height(), conf.width(), conf.channel(l).to_vec())?;
            save_raw(&conf_dir.join(format!("{name}_c{l}.raw")), &plane)?;
        }
    }
    log::info!("{} images, mean {:.1} ms per image", names.len(), total / names.len() as f64);
    write_file(&out.join("timing.csv"), timing)
}

fn baseline(cfg: &EmIcmConfig, out: &Path, images: &Path, truth: Option<&Path>, normalize: bool) -> anyhow::Result<()> {
    let (names, images) = load_named(images, normalize)?;
    let labels_dir = out.join("labels");
    create_dir(&labels_dir)?;
    let mut csv = String::from("image,energy,em_iterations,converged,dice\n");
    let mut traces = BTreeMap::new();
    for (name, img) in names.iter().zip(&images) {
        let result = em_icm_segment(img, cfg)?;
        save_labels(&labels_dir.join(format!("{name}.png")), &result.labels)?;
        let d = match truth {
            Some(dir) => {
                let t = load_labels(&dir.join(format!("{name}.png")), 2)?;
                format!("{:.10}", dice(&result.labels.mask(FOREGROUND), &t.mask(FOREGROUND))?)
            }
            None => String::new(),
        };
        let iters = result.trace.last().map_or(0, |t| t.em_iter);
        csv.push_str(&format!("{name},{:.10},{iters},{},{d}\n", result.final_energy(), result.converged));
        traces.insert(name.clone(), result.trace);
    }
    write_file(&out.join("emicm.csv"), csv)?;
    write_file(&out.join("traces.json"), serde_json::to_string_pretty(&traces)?)
}

fn evaluate(
    cfg: &EvalConfig,
    out: &Path,
    truth: &Path,
    pred: &Path,
    against: Option<&Path>,
    images: Option<&Path>,
    normalize: bool,
) -> anyhow::Result<()> {
    let truth_paths = image_paths(truth)?;
    let names: Vec<String> = truth_paths.iter().map(|p| stem(p)).collect();
    let truth_masks: Vec<Vec<bool>> =
        truth_paths.iter().map(|p| Ok(load_labels(p, 2)?.mask(FOREGROUND))).collect::<anyhow::Result<_>>()?;
    let imgs = match images {
        Some(dir) => {
            let by_stem: BTreeMap<String, PathBuf> = list_slices(dir)?.into_iter().map(|p| (stem(&p), p)).collect();
            let imgs = names
                .iter()
                .map(|n| {
                    let p = by_stem.get(n).ok_or_else(|| anyhow!("no image named {n} in {}", dir.display()))?;
                    Ok(load_image(p, normalize)?)
                })
                .collect::<anyhow::Result<Vec<_>>>()?;
            Some(imgs)
        }
        None => None,
    };
    let grid = default_threshold_grid();
    let sweep_of = |source: &Path| -> anyhow::Result<_> {
        let maps = foreground_maps(source, &names, imgs.as_deref())?;
        let refs: Vec<&[f64]> = maps.iter().map(Vec::as_slice).collect();
        Ok((threshold_sweep_set(&refs, &truth_masks, &grid, cfg.mode)?, maps))
    };
    let (sweep, maps) = sweep_of(pred)?;
    let contrast = match &imgs {
        Some(imgs) => imgs.iter().map(crate::eval::contrast_stat).collect(),
        None => vec![f64::NAN; names.len()],
    };
    let mut report = EvalReport::new(names.clone(), sweep, contrast);
    if let Some(other) = against {
        let (base, _) = sweep_of(other)?;
        report.p_value = Some(wilcoxon_signed_rank(&report.sweep.dice, &base.dice)?.p_value);
    }
    report.write(out)?;
    if let Some(imgs) = &imgs {
        let panels = out.join("panels");
        create_dir(&panels)?;
        for i in 0..cfg.panels.min(names.len()) {
            let t = report.sweep.thresholds[i];
            let mask: Vec<bool> = maps[i].iter().map(|&p| p >= t).collect();
            let (w, h, rgb) = render_panel(&imgs[i], &truth_masks[i], &mask)?;
            save_rgb(&panels.join(format!("{}.png", names[i])), w, h, &rgb)?;
        }
    }
    log::info!("mean Dice {:.4} over {} images", report.mean_dice, names.len());
    println!("{:.6}", report.mean_dice);
    Ok(())
}

/// Parses arguments, runs the subcommand and maps failures to exit codes.
pub fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match cli.run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            match e.downcast_ref::<Error>() {
                Some(Error::Diverged { .. }) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
