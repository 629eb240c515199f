//! Procedural foam images: a periodic nearest-seed cell partition whose cell
//! boundaries are thickened into walls, rendered with blur, noise and contrast.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::types::{Image2D, LabelMap};
use crate::{Error, Result};

pub const AIR: usize = 0;
pub const WALL: usize = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FoamGenConfig {
    pub height: usize,
    pub width: usize,
    pub cells: usize,
    /// Inclusive wall thickness range in voxels, drawn per pair of adjacent cells.
    pub thickness: (u32, u32),
    pub wall_mean: f64,
    pub air_mean: f64,
    pub noise_std: f64,
    /// Gaussian blur standard deviation in voxels (0 disables).
    pub blur_sigma: f64,
    /// Contrast factor range about mid-gray, drawn once per image.
    pub contrast: (f64, f64),
    pub seed: u64,
}

impl Default for FoamGenConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            cells: 12,
            thickness: (1, 3),
            wall_mean: 0.7,
            air_mean: 0.3,
            noise_std: 0.08,
            blur_sigma: 0.6,
            contrast: (1.0, 1.0),
            seed: 0,
        }
    }
}

impl FoamGenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.cells < 2 {
            return Err(Error::Config("foam needs a non-empty grid and at least 2 cells".into()));
        }
        if self.thickness.0 == 0 || self.thickness.0 > self.thickness.1 {
            return Err(Error::Config(format!("bad thickness range {:?}", self.thickness)));
        }
        if !(self.wall_mean > self.air_mean) {
            return Err(Error::Config("wall_mean must exceed air_mean".into()));
        }
        if !(self.noise_std >= 0.0 && self.blur_sigma >= 0.0) {
            return Err(Error::Config("noise_std and blur_sigma must be >= 0".into()));
        }
        if !(self.contrast.0 > 0.0 && self.contrast.0 <= self.contrast.1) {
            return Err(Error::Config(format!("bad contrast range {:?}", self.contrast)));
        }
        Ok(())
    }

    /// Expected wall fraction: boundary length per unit area of a random cell
    /// partition (`2 sqrt(cells / area)`) times the mean thickness.
    pub fn expected_wall_fraction(&self) -> f64 {
        let area = (self.height * self.width) as f64;
        let mean_t = (self.thickness.0 + self.thickness.1) as f64 / 2.0;
        2.0 * (self.cells as f64 / area).sqrt() * mean_t
    }
}

fn wrap(d: f64, period: f64) -> f64 {
    d - period * (d / period).round()
}

/// Exact wall labels for the cell layout drawn from `rng`.
fn foam_labels(cfg: &FoamGenConfig, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let (h, w) = (cfg.height as f64, cfg.width as f64);
    let seeds: Vec<(f64, f64)> = (0..cfg.cells).map(|_| (rng.random::<f64>() * h, rng.random::<f64>() * w)).collect();
    let n = cfg.cells;
    let mut thickness = vec![0.0; n * n];
    for a in 0..n {
        for b in a + 1..n {
            let t = rng.random_range(cfg.thickness.0..=cfg.thickness.1) as f64;
            thickness[a * n + b] = t;
            thickness[b * n + a] = t;
        }
    }
    let mut labels = vec![AIR; cfg.height * cfg.width];
    let mut disp = vec![(0.0, 0.0); n];
    for r in 0..cfg.height {
        for c in 0..cfg.width {
            let p = (r as f64 + 0.5, c as f64 + 0.5);
            let mut nearest = 0;
            for (i, s) in seeds.iter().enumerate() {
                disp[i] = (wrap(p.0 - s.0, h), wrap(p.1 - s.1, w));
                let d2 = disp[i].0 * disp[i].0 + disp[i].1 * disp[i].1;
                if d2 < disp[nearest].0 * disp[nearest].0 + disp[nearest].1 * disp[nearest].1 {
                    nearest = i;
                }
            }
            let da = disp[nearest];
            let da2 = da.0 * da.0 + da.1 * da.1;
            let wall = (0..n).filter(|&b| b != nearest).any(|b| {
                let db = disp[b];
                let sep = ((db.0 - da.0).powi(2) + (db.1 - da.1).powi(2)).sqrt();
                let to_bisector = (db.0 * db.0 + db.1 * db.1 - da2) / (2.0 * sep);
                to_bisector < thickness[nearest * n + b] / 2.0
            });
            if wall {
                labels[r * cfg.width + c] = WALL;
            }
        }
    }
    labels
}

fn gaussian_blur(values: &mut [f64], h: usize, w: usize, sigma: f64) {
    if sigma <= 0.0 {
        return;
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; values.len()];
    for r in 0..h {
        for c in 0..w {
            tmp[r * w + c] = kernel
                .iter()
                .enumerate()
                .map(|(k, kv)| kv * values[r * w + clamp(c as isize + k as isize - radius, w)])
                .sum();
        }
    }
    for r in 0..h {
        for c in 0..w {
            values[r * w + c] = kernel
                .iter()
                .enumerate()
                .map(|(k, kv)| kv * tmp[clamp(r as isize + k as isize - radius, h) * w + c])
                .sum();
        }
    }
}

/// One foam image and its exact labels (wall = 1). `index` selects an
/// independent random stream under the same seed.
pub fn generate_foam_indexed(cfg: &FoamGenConfig, index: u64) -> Result<(Image2D, LabelMap)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index);
    let labels = foam_labels(cfg, &mut rng);
    let mut values: Vec<f64> = labels.iter().map(|&l| if l == WALL { cfg.wall_mean } else { cfg.air_mean }).collect();
    gaussian_blur(&mut values, cfg.height, cfg.width, cfg.blur_sigma);
    if cfg.noise_std > 0.0 {
        let noise = Normal::new(0.0, cfg.noise_std).expect("finite std");
        for v in &mut values {
            *v += noise.sample(&mut rng);
        }
    }
    let f = if cfg.contrast.0 < cfg.contrast.1 { rng.random_range(cfg.contrast.0..=cfg.contrast.1) } else { cfg.contrast.0 };
    for v in &mut values {
        *v = (0.5 + f * (*v - 0.5)).clamp(0.0, 1.0);
    }
    Ok((Image2D::new(cfg.height, cfg.width, values)?, LabelMap::new(cfg.height, cfg.width, 2, labels)?))
}

pub fn generate_foam(cfg: &FoamGenConfig) -> Result<(Image2D, LabelMap)> {
    generate_foam_indexed(cfg, 0)
}

/// `count` independent images on consecutive streams starting at `first`.
pub fn generate_set(cfg: &FoamGenConfig, first: u64, count: usize) -> Result<Vec<(Image2D, LabelMap)>> {
    (0..count as u64).map(|i| generate_foam_indexed(cfg, first + i)).collect()
}

const THIN_DIRECTIONS: [(isize, isize); 4] = [(0, 1), (1, 0), (1, 1), (1, -1)];

/// Wall voxels one voxel wide along some axis or diagonal: both opposite
/// neighbors in that direction are in-grid air.
pub fn thin_wall_mask(labels: &LabelMap) -> Vec<bool> {
    let (h, w) = (labels.height() as isize, labels.width() as isize);
    let air = |r: isize, c: isize| r >= 0 && r < h && c >= 0 && c < w && labels.get((r * w + c) as usize) == AIR;
    (0..h * w)
        .map(|s| {
            let (r, c) = (s / w, s % w);
            labels.get(s as usize) == WALL
                && THIN_DIRECTIONS.iter().any(|&(dr, dc)| air(r + dr, c + dc) && air(r - dr, c - dc))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clean_render_has_two_levels() {
        let cfg = FoamGenConfig { noise_std: 0.0, blur_sigma: 0.0, ..Default::default() };
        let (img, labels) = generate_foam(&cfg).unwrap();
        for (v, l) in img.values().iter().zip(labels.labels()) {
            assert_eq!(*v, if *l == WALL { cfg.wall_mean } else { cfg.air_mean });
        }
        assert!(labels.labels().contains(&WALL) && labels.labels().contains(&AIR));
    }

    #[test]
    fn seeded_generation_repeats() {
        let cfg = FoamGenConfig::default();
        assert_eq!(generate_foam_indexed(&cfg, 4).unwrap(), generate_foam_indexed(&cfg, 4).unwrap());
        assert_ne!(generate_foam_indexed(&cfg, 4).unwrap().1, generate_foam_indexed(&cfg, 5).unwrap().1);
    }

    #[test]
    fn rendering_leaves_labels_unchanged() {
        let clean = FoamGenConfig { noise_std: 0.0, blur_sigma: 0.0, ..Default::default() };
        let noisy = FoamGenConfig { noise_std: 0.2, blur_sigma: 1.5, contrast: (0.8, 1.2), ..clean.clone() };
        assert_eq!(generate_foam(&clean).unwrap().1, generate_foam(&noisy).unwrap().1);
    }

    #[test]
    fn thin_walls_detected() {
        let labels = LabelMap::new(3, 3, 2, vec![0, 1, 0, 0, 1, 0, 0, 1, 0]).unwrap();
        assert_eq!(thin_wall_mask(&labels), vec![false, true, false, false, true, false, false, true, false]);
        let thick = LabelMap::uniform(3, 3, 2, WALL).unwrap();
        assert!(thin_wall_mask(&thick).iter().all(|t| !t));
    }
}
