//! Dice with threshold sweeps and a paired signed-rank comparison of two
//! segmenters: EM / ICM versus global thresholding at 0.5.

use hmrf_unet::data::synth::{generate_foam_indexed, FoamGenConfig, WALL};
use hmrf_unet::discrete::{em_icm_segment, EmIcmConfig};
use hmrf_unet::eval::{default_threshold_grid, threshold_sweep_set, wilcoxon_signed_rank, SweepMode};

fn main() -> anyhow::Result<()> {
    let foam = FoamGenConfig::default();
    let (mut icm, mut global) = (Vec::new(), Vec::new());
    let mut maps = Vec::new();
    let mut truth = Vec::new();
    for i in 0..12 {
        let (image, labels) = generate_foam_indexed(&foam, i)?;
        let seg = em_icm_segment(&image, &EmIcmConfig::default())?;
        let mask = labels.mask(WALL);
        icm.push(hmrf_unet::eval::dice(&seg.labels.mask(WALL), &mask)?);
        let bright: Vec<bool> = image.values().iter().map(|&y| y > 0.5).collect();
        global.push(hmrf_unet::eval::dice(&bright, &mask)?);
        maps.push(image.values().to_vec());
        truth.push(mask);
    }

    let grid = default_threshold_grid();
    let refs: Vec<&[f64]> = maps.iter().map(Vec::as_slice).collect();
    for mode in [SweepMode::PerDataset, SweepMode::PerImage] {
        let sweep = threshold_sweep_set(&refs, &truth, &grid, mode)?;
        println!("intensity sweep {mode:?}: mean Dice {:.4}", sweep.mean_dice());
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let test = wilcoxon_signed_rank(&icm, &global)?;
    println!("EM/ICM {:.4} vs threshold 0.5 {:.4}: W+ {} p {:.4} (exact {})", mean(&icm), mean(&global), test.w_plus, test.p_value, test.exact);
    Ok(())
}
