//! Dice scoring, threshold sweeps, contrast statistics, the Wilcoxon
//! signed-rank test and report output.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::types::{ConfidenceMap, Image2D, LabelMap};
use crate::{Error, Result};

/// `2 |a & b| / (|a| + |b|)`, with two empty masks scoring 1.
pub fn dice(pred: &[bool], truth: &[bool]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::Shape(format!("masks of {} and {} voxels", pred.len(), truth.len())));
    }
    let (mut inter, mut total) = (0usize, 0usize);
    for (&p, &t) in pred.iter().zip(truth) {
        inter += usize::from(p && t);
        total += usize::from(p) + usize::from(t);
    }
    Ok(if total == 0 { 1.0 } else { 2.0 * inter as f64 / total as f64 })
}

/// Dice of the `foreground` class between two label maps.
pub fn dice_labels(pred: &LabelMap, truth: &LabelMap, foreground: usize) -> Result<f64> {
    if pred.height() != truth.height() || pred.width() != truth.width() {
        return Err(Error::Shape(format!(
            "{}x{} vs {}x{}",
            pred.height(),
            pred.width(),
            truth.height(),
            truth.width()
        )));
    }
    dice(&pred.mask(foreground), &truth.mask(foreground))
}

/// 0.05, 0.10, ..., 0.95.
pub fn default_threshold_grid() -> Vec<f64> {
    (1..=19).map(|i| i as f64 / 20.0).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SweepMode {
    /// One threshold for the whole set, maximizing mean Dice.
    #[default]
    PerDataset,
    PerImage,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub mode: SweepMode,
    /// One entry per image (repeated for per-dataset sweeps).
    pub thresholds: Vec<f64>,
    pub dice: Vec<f64>,
}

impl SweepResult {
    pub fn mean_dice(&self) -> f64 {
        mean(&self.dice)
    }
}

fn binarize(p: &[f64], t: f64) -> Vec<bool> {
    p.iter().map(|&v| v >= t).collect()
}

/// Best threshold by mean Dice; ties go to the lowest threshold whatever the
/// grid order.
fn best_threshold(grid: &[f64], score: impl Fn(f64) -> Result<f64>) -> Result<(f64, f64)> {
    let mut best: Option<(f64, f64)> = None;
    for &t in grid {
        let s = score(t)?;
        best = match best {
            Some((bt, bs)) if bs > s || (bs == s && bt <= t) => Some((bt, bs)),
            _ => Some((t, s)),
        };
    }
    best.ok_or_else(|| Error::Config("empty threshold grid".into()))
}

/// Binarizes each foreground map at every grid threshold against its truth mask.
pub fn threshold_sweep_set(foreground: &[&[f64]], truth: &[Vec<bool>], grid: &[f64], mode: SweepMode) -> Result<SweepResult> {
    if foreground.len() != truth.len() || foreground.is_empty() {
        return Err(Error::Shape(format!("{} maps vs {} truths", foreground.len(), truth.len())));
    }
    match mode {
        SweepMode::PerDataset => {
            let (t, _) = best_threshold(grid, |t| {
                let scores: Result<Vec<f64>> = foreground.iter().zip(truth).map(|(p, g)| dice(&binarize(p, t), g)).collect();
                Ok(mean(&scores?))
            })?;
            let dice = foreground.iter().zip(truth).map(|(p, g)| dice(&binarize(p, t), g)).collect::<Result<_>>()?;
            Ok(SweepResult { mode, thresholds: vec![t; foreground.len()], dice })
        }
        SweepMode::PerImage => {
            let mut res = SweepResult { mode, thresholds: Vec::new(), dice: Vec::new() };
            for (p, g) in foreground.iter().zip(truth) {
                let (t, d) = best_threshold(grid, |t| dice(&binarize(p, t), g))?;
                res.thresholds.push(t);
                res.dice.push(d);
            }
            Ok(res)
        }
    }
}

/// Single-image sweep on channel `foreground`; returns `(threshold, dice)`.
pub fn threshold_sweep(c: &ConfidenceMap, truth: &LabelMap, foreground: usize, grid: &[f64]) -> Result<(f64, f64)> {
    let res = threshold_sweep_set(&[c.channel(foreground)], &[truth.mask(foreground)], grid, SweepMode::PerDataset)?;
    Ok((res.thresholds[0], res.dice[0]))
}

/// Population standard deviation of the intensities.
pub fn contrast_stat(img: &Image2D) -> f64 {
    std_dev(img.values())
}

pub fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Population standard deviation.
pub fn std_dev(v: &[f64]) -> f64 {
    // Shifting by the first value keeps constant inputs at exactly zero.
    let shift = v.first().copied().unwrap_or(0.0);
    let m = v.iter().map(|x| x - shift).sum::<f64>() / v.len() as f64;
    (v.iter().map(|x| (x - shift - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
}

/// Confidence-weighted intensity mean of every class, pooled over all images.
pub fn pooled_fuzzy_means(images: &[Image2D], confs: &[ConfidenceMap]) -> Result<Vec<f64>> {
    let k = confs.first().map(|c| c.num_classes()).ok_or_else(|| Error::InsufficientData("no predictions".into()))?;
    let mut num = vec![0.0; k];
    let mut den = vec![0.0; k];
    for (img, c) in images.iter().zip(confs) {
        for (l, (n, d)) in num.iter_mut().zip(den.iter_mut()).enumerate() {
            for (&p, &y) in c.channel(l).iter().zip(img.values()) {
                *n += p * y;
                *d += p;
            }
        }
    }
    Ok(num.iter().zip(&den).map(|(n, d)| if *d > 0.0 { n / d } else { f64::NEG_INFINITY }).collect())
}

/// Largest `n` served by the exact null distribution.
pub const WILCOXON_EXACT_MAX: usize = 25;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// Sum of ranks of positive differences `a - b`.
    pub w_plus: f64,
    /// Nonzero pairs used.
    pub n: usize,
    pub p_value: f64,
    pub exact: bool,
}

/// Two-sided signed-rank test on `a - b`. Zero differences are dropped and
/// tied magnitudes get mid-ranks. Exact for `n <= 25`, otherwise a normal
/// approximation with continuity and tie correction.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<WilcoxonResult> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("{} vs {} paired scores", a.len(), b.len())));
    }
    let mut diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|d| *d != 0.0).collect();
    let n = diffs.len();
    if n < 5 {
        return Err(Error::InsufficientData(format!("{n} nonzero paired differences, need at least 5")));
    }
    diffs.sort_by(|x, y| x.abs().total_cmp(&y.abs()));
    // Doubled mid-ranks stay integral.
    let mut ranks2 = vec![0u64; n];
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && diffs[j + 1].abs() == diffs[i].abs() {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        for r in &mut ranks2[i..=j] {
            *r = (i + 1 + j + 1) as u64;
        }
        i = j + 1;
    }
    let w2: u64 = diffs.iter().zip(&ranks2).filter(|(d, _)| **d > 0.0).map(|(_, r)| r).sum();
    let w_plus = w2 as f64 / 2.0;
    if n <= WILCOXON_EXACT_MAX {
        let total: u64 = ranks2.iter().sum();
        let mut counts = vec![0f64; total as usize + 1];
        counts[0] = 1.0;
        for &r in &ranks2 {
            for s in (r as usize..counts.len()).rev() {
                counts[s] += counts[s - r as usize];
            }
        }
        let all = 2f64.powi(n as i32);
        let lower: f64 = counts[..=w2 as usize].iter().sum::<f64>() / all;
        let upper: f64 = counts[w2 as usize..].iter().sum::<f64>() / all;
        let p_value = (2.0 * lower.min(upper)).min(1.0);
        return Ok(WilcoxonResult { w_plus, n, p_value, exact: true });
    }
    let nf = n as f64;
    let mu = nf * (nf + 1.0) / 4.0;
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
    let z = ((w_plus - mu).abs() - 0.5).max(0.0) / var.sqrt();
    let p_value = libm::erfc(z / std::f64::consts::SQRT_2).min(1.0);
    Ok(WilcoxonResult { w_plus, n, p_value, exact: false })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub names: Vec<String>,
    pub sweep: SweepResult,
    pub contrast: Vec<f64>,
    pub mean_dice: f64,
    pub std_dice: f64,
    pub p_value: Option<f64>,
}

impl EvalReport {
    pub fn new(names: Vec<String>, sweep: SweepResult, contrast: Vec<f64>) -> Self {
        Self { mean_dice: mean(&sweep.dice), std_dice: std_dev(&sweep.dice), names, sweep, contrast, p_value: None }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("image,threshold,dice,contrast\n");
        for i in 0..self.names.len() {
            out.push_str(&format!(
                "{},{:.2},{:.10},{:.10}\n",
                self.names[i], self.sweep.thresholds[i], self.sweep.dice[i], self.contrast[i]
            ));
        }
        out
    }

    /// Writes `report.csv` and `summary.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let csv = dir.join("report.csv");
        std::fs::write(&csv, self.to_csv()).map_err(|e| Error::file(&csv, e))?;
        let json = dir.join("summary.json");
        let summary = serde_json::json!({
            "images": self.names.len(),
            "mode": self.sweep.mode,
            "mean_dice": self.mean_dice,
            "std_dice": self.std_dice,
            "threshold": self.sweep.thresholds.first(),
            "mean_contrast": mean(&self.contrast),
            "p_value": self.p_value,
        });
        std::fs::write(&json, serde_json::to_string_pretty(&summary)?).map_err(|e| Error::file(&json, e))
    }
}

/// Side-by-side RGB panel `input | truth | prediction | errors`. In the error
/// tile false positives are blue and false negatives red over the input.
pub fn render_panel(img: &Image2D, truth: &[bool], pred: &[bool]) -> Result<(usize, usize, Vec<u8>)> {
    let (h, w) = (img.height(), img.width());
    if truth.len() != img.len() || pred.len() != img.len() {
        return Err(Error::Shape("panel masks must match the image".into()));
    }
    let width = 4 * w;
    let mut rgb = vec![0u8; h * width * 3];
    let gray = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let mask = |b: bool| if b { 255 } else { 0 };
    for r in 0..h {
        for c in 0..w {
            let s = r * w + c;
            let g = gray(img.values()[s]);
            let err = match (pred[s], truth[s]) {
                (true, false) => [0, 0, 255],
                (false, true) => [255, 0, 0],
                _ => [g, g, g],
            };
            let tiles = [[g; 3], [mask(truth[s]); 3], [mask(pred[s]); 3], err];
            for (t, px) in tiles.iter().enumerate() {
                let o = (r * width + t * w + c) * 3;
                rgb[o..o + 3].copy_from_slice(px);
            }
        }
    }
    Ok((width, h, rgb))
}
