//! Grid-valued domain types shared by every stage of the pipeline.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Lower bound applied to every class standard deviation (normalized intensity units).
pub const SIGMA_FLOOR: f64 = 1e-4;

/// Single-channel grayscale raster, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Image2D {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl Image2D {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Shape(format!("image must be non-empty, got {height}x{width}")));
        }
        if values.len() != height * width {
            return Err(Error::Shape(format!(
                "{height}x{width} image needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        Ok(Self { height, width, values })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self::new(height, width, vec![value; height * width]).expect("non-empty image")
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let values = (0..height * width).map(|i| f(i / width, i % width)).collect();
        Self::new(height, width, values).expect("non-empty image")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    pub fn same_shape(&self, height: usize, width: usize) -> bool {
        self.height == height && self.width == width
    }
}

/// Hard per-voxel class assignment.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMap {
    height: usize,
    width: usize,
    num_classes: usize,
    labels: Vec<usize>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, num_classes: usize, labels: Vec<usize>) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {num_classes}")));
        }
        if height == 0 || width == 0 || labels.len() != height * width {
            return Err(Error::Shape(format!(
                "{height}x{width} label map with {} labels",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::MissingClass { class: bad, available: num_classes });
        }
        Ok(Self { height, width, num_classes, labels })
    }

    pub fn uniform(height: usize, width: usize, num_classes: usize, label: usize) -> Result<Self> {
        Self::new(height, width, num_classes, vec![label; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn get(&self, s: usize) -> usize {
        self.labels[s]
    }

    /// Panics if `label` is out of range; callers iterate over `0..num_classes`.
    pub fn set(&mut self, s: usize, label: usize) {
        assert!(label < self.num_classes);
        self.labels[s] = label;
    }

    pub fn same_shape_as(&self, img: &Image2D) -> bool {
        img.same_shape(self.height, self.width)
    }

    /// Binary mask of voxels carrying `class`.
    pub fn mask(&self, class: usize) -> Vec<bool> {
        self.labels.iter().map(|&l| l == class).collect()
    }

    /// Applies `perm[old] = new` to every label.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self { labels: self.labels.iter().map(|&l| perm[l]).collect(), ..self.clone() }
    }
}

/// Per-voxel class probabilities stored as class planes (`class * voxels + voxel`),
/// the same layout as one batch item of a `(n, classes, h, w)` network output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceMap {
    height: usize,
    width: usize,
    num_classes: usize,
    data: Vec<f64>,
}

impl ConfidenceMap {
    /// Validates ranges and that every voxel's confidences sum to 1 within 1e-6.
    pub fn new(height: usize, width: usize, num_classes: usize, data: Vec<f64>) -> Result<Self> {
        let map = Self::new_unchecked(height, width, num_classes, data)?;
        let n = height * width;
        for s in 0..n {
            let mut total = 0.0;
            for l in 0..num_classes {
                let c = map.data[l * n + s];
                if !(0.0..=1.0).contains(&c) {
                    return Err(Error::Shape(format!("confidence {c} at voxel {s} outside [0,1]")));
                }
                total += c;
            }
            if (total - 1.0).abs() > 1e-6 {
                return Err(Error::Shape(format!("confidences at voxel {s} sum to {total}")));
            }
        }
        Ok(map)
    }

    /// Shape checks only; used for softmax outputs that satisfy the invariants by construction.
    pub fn new_unchecked(height: usize, width: usize, num_classes: usize, data: Vec<f64>) -> Result<Self> {
        if num_classes < 2 || height == 0 || width == 0 || data.len() != height * width * num_classes {
            return Err(Error::Shape(format!(
                "{height}x{width}x{num_classes} confidence map with {} values",
                data.len()
            )));
        }
        Ok(Self { height, width, num_classes, data })
    }

    /// Every voxel gets the same confidence vector.
    pub fn constant(height: usize, width: usize, row: &[f64]) -> Result<Self> {
        let n = height * width;
        let data = row.iter().flat_map(|&c| std::iter::repeat_n(c, n)).collect();
        Self::new(height, width, row.len(), data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_voxels(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, s: usize, l: usize) -> f64 {
        self.data[l * self.num_voxels() + s]
    }

    /// Confidence plane of one class.
    pub fn channel(&self, l: usize) -> &[f64] {
        let n = self.num_voxels();
        &self.data[l * n..(l + 1) * n]
    }

    pub fn row(&self, s: usize) -> Vec<f64> {
        (0..self.num_classes).map(|l| self.get(s, l)).collect()
    }

    pub fn same_shape_as(&self, img: &Image2D) -> bool {
        img.same_shape(self.height, self.width)
    }

    /// Reorders class channels: channel `perm[l]` of the result is channel `l` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let n = self.num_voxels();
        let mut data = vec![0.0; self.data.len()];
        for (l, &to) in perm.iter().enumerate() {
            data[to * n..(to + 1) * n].copy_from_slice(self.channel(l));
        }
        Self { data, ..self.clone() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Discrete,
    Fuzzy,
}

/// Per-class Gaussian parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassParams {
    pub kind: ParamKind,
    means: Vec<f64>,
    stds: Vec<f64>,
    /// Classes whose parameters were substituted (empty or near-empty class).
    pub degenerate: Vec<bool>,
}

impl ClassParams {
    /// Standard deviations are clamped to [`SIGMA_FLOOR`].
    pub fn new(kind: ParamKind, means: Vec<f64>, stds: Vec<f64>) -> Result<Self> {
        if means.len() != stds.len() || means.len() < 2 {
            return Err(Error::Config(format!(
                "class params need matching means/stds for >= 2 classes, got {}/{}",
                means.len(),
                stds.len()
            )));
        }
        let stds = stds.into_iter().map(|s| s.max(SIGMA_FLOOR)).collect();
        let degenerate = vec![false; means.len()];
        Ok(Self { kind, means, stds, degenerate })
    }

    pub fn discrete(means: Vec<f64>, stds: Vec<f64>) -> Result<Self> {
        Self::new(ParamKind::Discrete, means, stds)
    }

    pub fn num_classes(&self) -> usize {
        self.means.len()
    }

    pub fn mean(&self, l: usize) -> f64 {
        self.means[l]
    }

    pub fn std(&self, l: usize) -> f64 {
        self.stds[l]
    }

    pub fn means(&self) -> &[f64] {
        &self.means
    }

    pub fn stds(&self) -> &[f64] {
        &self.stds
    }

    /// Class ids ordered by ascending mean (ties by id). `order[rank] = class`.
    pub fn ascending_order(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.num_classes()).collect();
        order.sort_by(|&a, &b| self.means[a].total_cmp(&self.means[b]).then(a.cmp(&b)));
        order
    }

    /// Permutation `perm[old] = new` that sorts classes by ascending mean.
    pub fn canonical_permutation(&self) -> Vec<usize> {
        let mut perm = vec![0; self.num_classes()];
        for (rank, class) in self.ascending_order().into_iter().enumerate() {
            perm[class] = rank;
        }
        perm
    }

    pub fn permuted(&self, perm: &[usize]) -> Self {
        let k = self.num_classes();
        let mut means = vec![0.0; k];
        let mut stds = vec![0.0; k];
        let mut degenerate = vec![false; k];
        for old in 0..k {
            means[perm[old]] = self.means[old];
            stds[perm[old]] = self.stds[old];
            degenerate[perm[old]] = self.degenerate[old];
        }
        Self { kind: self.kind, means, stds, degenerate }
    }
}

/// Result of [`normalize_image`].
#[derive(Clone, Debug, PartialEq)]
pub struct Normalized {
    pub image: Image2D,
    /// The input was constant; the output is all zeros.
    pub constant_input: bool,
}

/// Min-max rescaling to `[0, 1]`.
pub fn normalize_image(img: &Image2D) -> Normalized {
    let (lo, hi) = img
        .values()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if hi <= lo {
        log::warn!("constant image ({lo}); normalized to zeros");
        return Normalized {
            image: Image2D::filled(img.height(), img.width(), 0.0),
            constant_input: true,
        };
    }
    let span = hi - lo;
    let values = img.values().iter().map(|v| (v - lo) / span).collect();
    Normalized {
        image: Image2D::new(img.height(), img.width(), values).expect("same shape"),
        constant_input: false,
    }
}

pub fn one_hot(labels: &LabelMap) -> ConfidenceMap {
    let n = labels.len();
    let k = labels.num_classes();
    let mut data = vec![0.0; n * k];
    for (s, &l) in labels.labels().iter().enumerate() {
        data[l * n + s] = 1.0;
    }
    ConfidenceMap::new_unchecked(labels.height(), labels.width(), k, data).expect("consistent shape")
}

/// Per-voxel argmax; ties resolve to the lowest class id.
pub fn argmax_labels(c: &ConfidenceMap) -> LabelMap {
    let labels = (0..c.num_voxels())
        .map(|s| {
            let mut best = 0;
            for l in 1..c.num_classes() {
                if c.get(s, l) > c.get(s, best) {
                    best = l;
                }
            }
            best
        })
        .collect();
    LabelMap::new(c.height(), c.width(), c.num_classes(), labels).expect("labels in range")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn normalize_maps_endpoints() {
        let img = Image2D::new(1, 2, vec![10.0, 250.0]).unwrap();
        let out = normalize_image(&img);
        assert_eq!(out.image.values(), &[0.0, 1.0]);
        assert!(!out.constant_input);
    }

    #[test]
    fn normalize_constant_image_is_zero_with_warning() {
        let img = Image2D::new(1, 3, vec![5.0; 3]).unwrap();
        let out = normalize_image(&img);
        assert_eq!(out.image.values(), &[0.0; 3]);
        assert!(out.constant_input);
    }

    #[test]
    fn normalize_is_identity_on_full_range_unit_data() {
        let img = Image2D::new(1, 3, vec![0.0, 0.5, 1.0]).unwrap();
        assert_eq!(normalize_image(&img).image, img);
    }

    #[test]
    fn empty_shapes_are_rejected() {
        assert!(Image2D::new(0, 3, vec![]).is_err());
        assert!(Image2D::new(2, 2, vec![0.0; 3]).is_err());
        assert!(LabelMap::new(1, 2, 2, vec![0, 2]).is_err());
        assert!(LabelMap::new(1, 2, 1, vec![0, 0]).is_err());
    }

    #[test]
    fn one_hot_rows() {
        let labels = LabelMap::new(1, 2, 2, vec![0, 1]).unwrap();
        let c = one_hot(&labels);
        assert_eq!(c.row(0), vec![1.0, 0.0]);
        assert_eq!(c.row(1), vec![0.0, 1.0]);
    }

    #[test]
    fn argmax_examples_and_tie_break() {
        let c = ConfidenceMap::new(1, 2, 2, vec![0.9, 0.5, 0.1, 0.5]).unwrap();
        assert_eq!(argmax_labels(&c).labels(), &[0, 0]);
        let c = ConfidenceMap::new(1, 1, 3, vec![0.2, 0.3, 0.5]).unwrap();
        assert_eq!(argmax_labels(&c).labels(), &[2]);
    }

    #[test]
    fn confidence_map_rejects_bad_rows() {
        assert!(ConfidenceMap::new(1, 1, 2, vec![0.6, 0.6]).is_err());
        assert!(ConfidenceMap::new(1, 1, 2, vec![1.5, -0.5]).is_err());
    }

    #[test]
    fn one_hot_argmax_round_trip_exhaustive_on_3x3_binary() {
        for code in 0..512usize {
            let labels: Vec<usize> = (0..9).map(|i| (code >> i) & 1).collect();
            let map = LabelMap::new(3, 3, 2, labels).unwrap();
            assert_eq!(argmax_labels(&one_hot(&map)), map);
        }
    }

    #[test]
    fn sigma_is_floored() {
        let p = ClassParams::discrete(vec![0.1, 0.9], vec![0.0, 0.2]).unwrap();
        assert_eq!(p.std(0), SIGMA_FLOOR);
        assert_eq!(p.std(1), 0.2);
    }

    #[test]
    fn canonical_permutation_sorts_by_mean() {
        let p = ClassParams::discrete(vec![0.8, 0.2, 0.5], vec![0.1, 0.2, 0.3]).unwrap();
        let perm = p.canonical_permutation();
        assert_eq!(perm, vec![2, 0, 1]);
        let q = p.permuted(&perm);
        assert_eq!(q.means(), &[0.2, 0.5, 0.8]);
        assert_eq!(q.stds(), &[0.2, 0.3, 0.1]);
    }

    proptest! {
        #[test]
        fn one_hot_argmax_round_trip(labels in proptest::collection::vec(0usize..4, 12)) {
            let map = LabelMap::new(3, 4, 4, labels).unwrap();
            prop_assert_eq!(argmax_labels(&one_hot(&map)), map);
        }

        #[test]
        fn normalize_is_idempotent(values in proptest::collection::vec(-100.0f64..100.0, 2..40)) {
            prop_assume!(values.iter().any(|v| *v != values[0]));
            let img = Image2D::new(1, values.len(), values).unwrap();
            let once = normalize_image(&img).image;
            let twice = normalize_image(&once).image;
            for (a, b) in once.values().iter().zip(twice.values()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
            prop_assert!(once.values().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
