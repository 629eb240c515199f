//! The five geometric variants and contrast scaling about mid-gray.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::types::{Image2D, LabelMap};
use crate::{Error, Result};

pub const CONTRAST_RANGE: (f64, f64) = (0.8, 1.2);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Rot90,
    Rot180,
    Rot270,
    FlipX,
    FlipY,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::Rot90, Variant::Rot180, Variant::Rot270, Variant::FlipX, Variant::FlipY];

    pub fn from_id(id: usize) -> Result<Self> {
        Self::ALL.get(id).copied().ok_or_else(|| Error::Config(format!("augmentation variant {id} not in 0..5")))
    }

    fn output_shape(self, h: usize, w: usize) -> (usize, usize) {
        match self {
            Variant::Rot90 | Variant::Rot270 => (w, h),
            _ => (h, w),
        }
    }

    /// Source `(row, col)` of output position `(r, c)` in an `h x w` input.
    /// Rotations are counter-clockwise.
    fn source(self, r: usize, c: usize, h: usize, w: usize) -> (usize, usize) {
        match self {
            Variant::Rot90 => (c, w - 1 - r),
            Variant::Rot180 => (h - 1 - r, w - 1 - c),
            Variant::Rot270 => (h - 1 - c, r),
            Variant::FlipX => (r, w - 1 - c),
            Variant::FlipY => (h - 1 - r, c),
        }
    }
}

fn transform<T: Copy>(values: &[T], h: usize, w: usize, v: Variant) -> (usize, usize, Vec<T>) {
    let (oh, ow) = v.output_shape(h, w);
    let mut out = Vec::with_capacity(values.len());
    for r in 0..oh {
        for c in 0..ow {
            let (sr, sc) = v.source(r, c, h, w);
            out.push(values[sr * w + sc]);
        }
    }
    (oh, ow, out)
}

/// Scales contrast by `factor` about 0.5, clips to `[0, 1]`, then applies the
/// geometric variant.
pub fn augment(img: &Image2D, variant: Variant, factor: f64) -> Result<Image2D> {
    if !(CONTRAST_RANGE.0..=CONTRAST_RANGE.1).contains(&factor) {
        return Err(Error::Config(format!("contrast factor {factor} outside [0.8, 1.2]")));
    }
    let scaled: Vec<f64> = if factor == 1.0 {
        img.values().to_vec()
    } else {
        img.values().iter().map(|v| (0.5 + factor * (v - 0.5)).clamp(0.0, 1.0)).collect()
    };
    let (h, w, out) = transform(&scaled, img.height(), img.width(), variant);
    Image2D::new(h, w, out)
}

pub fn augment_labels(labels: &LabelMap, variant: Variant) -> Result<LabelMap> {
    let (h, w, out) = transform(labels.labels(), labels.height(), labels.width(), variant);
    LabelMap::new(h, w, labels.num_classes(), out)
}

/// Contrast factor for sample `index`, uniform in the allowed range.
pub fn contrast_draw(seed: u64, index: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng.random_range(CONTRAST_RANGE.0..=CONTRAST_RANGE.1)
}
