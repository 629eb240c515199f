//! Synthetic data, image files, splitting, augmentation and dataset manifests.
//!
//! A dataset directory holds `manifest.json` plus `<split>/images/<name>.png`
//! and, when ground truth exists, `<split>/labels/<name>.png`.

pub mod augment;
pub mod io;
pub mod split;
pub mod synth;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::train::Dataset;
use crate::types::{Image2D, LabelMap};
use crate::{Error, Result};
use augment::{augment, augment_labels, contrast_draw, Variant};
use split::{Split, SplitPlan};
use synth::{generate_foam_indexed, FoamGenConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SampleSource {
    Foam { index: u64 },
    Slice { slice: usize, cuboid: usize, origin: (usize, usize) },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestSample {
    pub name: String,
    pub split: Split,
    pub source: SampleSource,
    pub variant: Option<Variant>,
    pub contrast: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub generator: Option<FoamGenConfig>,
    pub split_plan: Option<SplitPlan>,
    pub samples: Vec<ManifestSample>,
}

impl DatasetManifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::file(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::file(&path, e))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthDatasetConfig {
    pub foam: FoamGenConfig,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    /// Augmented variants per generated image (0 keeps the originals only).
    pub augmentations: usize,
}

impl Default for SynthDatasetConfig {
    fn default() -> Self {
        Self { foam: FoamGenConfig::default(), train: 512, val: 32, test: 64, augmentations: 0 }
    }
}

/// One sample in memory.
#[derive(Clone, Debug)]
pub struct Sample {
    pub meta: ManifestSample,
    pub image: Image2D,
    pub labels: Option<LabelMap>,
}

/// Image, labels, augmentation variant and contrast factor.
type AugmentedSample = (Image2D, Option<LabelMap>, Option<Variant>, Option<f64>);

fn augmented(
    base: &Image2D,
    labels: Option<&LabelMap>,
    augmentations: usize,
    seed: u64,
    counter: &mut u64,
) -> Result<Vec<AugmentedSample>> {
    if augmentations == 0 {
        return Ok(vec![(base.clone(), labels.cloned(), None, None)]);
    }
    (0..augmentations.min(Variant::ALL.len()))
        .map(|v| {
            let variant = Variant::ALL[v];
            let f = contrast_draw(seed, *counter);
            *counter += 1;
            let img = augment(base, variant, f)?;
            let lab = labels.map(|l| augment_labels(l, variant)).transpose()?;
            Ok((img, lab, Some(variant), Some(f)))
        })
        .collect()
}

/// Generates train / val / test foam samples on disjoint random streams.
pub fn synth_dataset(cfg: &SynthDatasetConfig) -> Result<(Vec<Sample>, DatasetManifest)> {
    cfg.foam.validate()?;
    let mut samples = Vec::new();
    let mut index = 0u64;
    let mut counter = 0u64;
    for (split, count) in [(Split::Train, cfg.train), (Split::Val, cfg.val), (Split::Test, cfg.test)] {
        for i in 0..count {
            let (img, labels) = generate_foam_indexed(&cfg.foam, index)?;
            for (k, (image, labels, variant, contrast)) in
                augmented(&img, Some(&labels), cfg.augmentations, cfg.foam.seed, &mut counter)?.into_iter().enumerate()
            {
                let name = if variant.is_some() { format!("{i:05}_{k}") } else { format!("{i:05}") };
                samples.push(Sample {
                    meta: ManifestSample { name, split, source: SampleSource::Foam { index }, variant, contrast },
                    image,
                    labels,
                });
            }
            index += 1;
        }
    }
    let manifest = DatasetManifest {
        generator: Some(cfg.foam.clone()),
        split_plan: None,
        samples: samples.iter().map(|s| s.meta.clone()).collect(),
    };
    Ok((samples, manifest))
}

fn crop(img: &Image2D, origin: (usize, usize), window: (usize, usize)) -> Result<Image2D> {
    Ok(Image2D::from_fn(window.0, window.1, |r, c| img.get(origin.0 + r, origin.1 + c)))
}

fn crop_labels(l: &LabelMap, origin: (usize, usize), window: (usize, usize)) -> Result<LabelMap> {
    let w = l.width();
    let labels = (0..window.0)
        .flat_map(|r| (0..window.1).map(move |c| (origin.0 + r) * w + origin.1 + c))
        .map(|s| l.get(s))
        .collect();
    LabelMap::new(window.0, window.1, l.num_classes(), labels)
}

/// Cuts the windows of every cuboid out of a slice stack and augments them.
pub fn extract_split_samples(
    stack: &[Image2D],
    labels: Option<&[LabelMap]>,
    plan: &SplitPlan,
    seed: u64,
) -> Result<Vec<Sample>> {
    if let Some(l) = labels {
        if l.len() != stack.len() {
            return Err(Error::Shape(format!("{} slices vs {} label slices", stack.len(), l.len())));
        }
    }
    let mut counter = 0u64;
    let mut out = Vec::new();
    for split in Split::ALL {
        for cuboid in plan.cuboids_in(split) {
            for slice in cuboid.slices.clone() {
                let img = crop(&stack[slice], cuboid.origin, plan.window)?;
                let lab = labels.map(|l| crop_labels(&l[slice], cuboid.origin, plan.window)).transpose()?;
                for (k, (image, labels, variant, contrast)) in
                    augmented(&img, lab.as_ref(), plan.augmentations, seed, &mut counter)?.into_iter().enumerate()
                {
                    let source = SampleSource::Slice { slice, cuboid: cuboid.id, origin: cuboid.origin };
                    let name = format!("c{}_s{slice:05}_{k}", cuboid.id);
                    out.push(Sample { meta: ManifestSample { name, split, source, variant, contrast }, image, labels });
                }
            }
        }
    }
    Ok(out)
}

/// Writes samples and the manifest; existing files of the same names are replaced.
pub fn write_dataset(dir: &Path, samples: &[Sample], manifest: &DatasetManifest) -> Result<()> {
    for split in Split::ALL {
        let images = dir.join(split.name()).join("images");
        std::fs::create_dir_all(&images).map_err(|e| Error::file(&images, e))?;
        if samples.iter().any(|s| s.meta.split == split && s.labels.is_some()) {
            let labels = dir.join(split.name()).join("labels");
            std::fs::create_dir_all(&labels).map_err(|e| Error::file(&labels, e))?;
        }
    }
    for s in samples {
        let base = dir.join(s.meta.split.name());
        io::save_image(&base.join("images").join(format!("{}.png", s.meta.name)), &s.image)?;
        if let Some(l) = &s.labels {
            io::save_labels(&base.join("labels").join(format!("{}.png", s.meta.name)), l)?;
        }
    }
    let path = dir.join("manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(manifest)?).map_err(|e| Error::file(&path, e))
}

/// Loads one split of a dataset directory in manifest order. Labels are
/// included when every sample of the split has them.
pub fn load_split(dir: &Path, split: Split) -> Result<(Vec<String>, Dataset)> {
    let manifest = DatasetManifest::load(dir)?;
    let base = dir.join(split.name());
    let names: Vec<String> = manifest.samples.iter().filter(|s| s.split == split).map(|s| s.name.clone()).collect();
    let images = names
        .iter()
        .map(|n| io::load_image(&base.join("images").join(format!("{n}.png")), false))
        .collect::<Result<Vec<_>>>()?;
    let label_paths: Vec<_> = names.iter().map(|n| base.join("labels").join(format!("{n}.png"))).collect();
    let data = if !names.is_empty() && label_paths.iter().all(|p| p.exists()) {
        let labels = label_paths.iter().map(|p| io::load_labels(p, 2)).collect::<Result<Vec<_>>>()?;
        Dataset::labeled(images, labels)?
    } else {
        Dataset::unlabeled(images)
    };
    Ok((names, data))
}

/// In-memory datasets of the three splits.
pub fn datasets_by_split(samples: &[Sample]) -> Result<[Dataset; 3]> {
    let build = |split: Split| -> Result<Dataset> {
        let chosen: Vec<&Sample> = samples.iter().filter(|s| s.meta.split == split).collect();
        let images = chosen.iter().map(|s| s.image.clone()).collect();
        if !chosen.is_empty() && chosen.iter().all(|s| s.labels.is_some()) {
            Dataset::labeled(images, chosen.iter().map(|s| s.labels.clone().expect("checked")).collect())
        } else {
            Ok(Dataset::unlabeled(images))
        }
    };
    Ok([build(Split::Train)?, build(Split::Val)?, build(Split::Test)?])
}
