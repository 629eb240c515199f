//! Cuboid-based split of a slice stack: full-size test slices at both ends,
//! discarded gap slices, and the remaining block tiled into non-overlapping
//! windows whose cuboids are assigned whole to train, validation or test.

use std::ops::Range;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    /// Full-size test slices taken from each end of the stack.
    pub test_slices: usize,
    /// Slices discarded after each full-size test block.
    pub gap_slices: usize,
    /// Window `(height, width)`.
    pub window: (usize, usize),
    /// Cuboids assigned to `(train, val, test)`.
    pub assignment: (usize, usize, usize),
    pub augmentations: usize,
    /// Seed of the cuboid-to-split shuffle.
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { test_slices: 40, gap_slices: 10, window: (256, 256), assignment: (7, 1, 1), augmentations: 5, seed: 0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cuboid {
    pub id: usize,
    pub slices: Range<usize>,
    /// Window origin `(row, col)` in the cross-section.
    pub origin: (usize, usize),
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub window: (usize, usize),
    pub augmentations: usize,
    pub fullsize_test: Vec<usize>,
    pub discarded: Vec<usize>,
    pub cuboids: Vec<Cuboid>,
}

/// One training sample: a window of one slice under one augmentation variant.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRef {
    pub cuboid: usize,
    pub slice: usize,
    pub variant: usize,
}

impl SplitPlan {
    pub fn cuboids_in(&self, split: Split) -> impl Iterator<Item = &Cuboid> {
        self.cuboids.iter().filter(move |c| c.split == split)
    }

    /// Samples of a split: every slice of every assigned cuboid, once per
    /// augmentation variant (the variants replace the original).
    pub fn samples(&self, split: Split) -> Vec<SampleRef> {
        let mut out = Vec::new();
        for c in self.cuboids_in(split) {
            for slice in c.slices.clone() {
                for variant in 0..self.augmentations.max(1) {
                    out.push(SampleRef { cuboid: c.id, slice, variant });
                }
            }
        }
        out
    }

    pub fn sample_count(&self, split: Split) -> usize {
        self.cuboids_in(split).map(|c| c.slices.len()).sum::<usize>() * self.augmentations.max(1)
    }

    /// Every `(slice, row, col)` voxel source of a split.
    pub fn voxel_sources(&self, split: Split) -> Vec<(usize, usize, usize)> {
        let (wh, ww) = self.window;
        let mut out = Vec::new();
        for c in self.cuboids_in(split) {
            for s in c.slices.clone() {
                for r in c.origin.0..c.origin.0 + wh {
                    for col in c.origin.1..c.origin.1 + ww {
                        out.push((s, r, col));
                    }
                }
            }
        }
        out
    }
}

pub fn cuboid_split(num_slices: usize, height: usize, width: usize, cfg: &SplitConfig) -> Result<SplitPlan> {
    let (wh, ww) = cfg.window;
    if wh == 0 || ww == 0 || wh > height || ww > width {
        return Err(Error::Config(format!("window {wh}x{ww} does not fit the {height}x{width} cross-section")));
    }
    let reserved = 2 * (cfg.test_slices + cfg.gap_slices);
    if reserved >= num_slices {
        return Err(Error::InsufficientData(format!(
            "{num_slices} slices leave none after {reserved} test and gap slices"
        )));
    }
    let (t, g) = (cfg.test_slices, cfg.gap_slices);
    let fullsize_test: Vec<usize> = (0..t).chain(num_slices - t..num_slices).collect();
    let discarded: Vec<usize> = (t..t + g).chain(num_slices - t - g..num_slices - t).collect();
    let body = t + g..num_slices - t - g;
    let (rows, cols) = (height / wh, width / ww);
    let n = rows * cols;
    let (a, b, c) = cfg.assignment;
    if a + b + c != n {
        return Err(Error::Config(format!("assignment {a}/{b}/{c} does not cover the {n} cuboids")));
    }
    let mut splits: Vec<Split> =
        std::iter::repeat_n(Split::Train, a).chain(std::iter::repeat_n(Split::Val, b)).chain(std::iter::repeat_n(Split::Test, c)).collect();
    splits.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
    let cuboids = (0..n)
        .map(|id| Cuboid { id, slices: body.clone(), origin: ((id / cols) * wh, (id % cols) * ww), split: splits[id] })
        .collect();
    Ok(SplitPlan { window: cfg.window, augmentations: cfg.augmentations, fullsize_test, discarded, cuboids })
}
