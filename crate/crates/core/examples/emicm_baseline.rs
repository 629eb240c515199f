//! Classical EM / ICM segmentation of a synthetic foam slice with the Potts
//! and Banerjee priors.

use hmrf_unet::data::synth::{generate_foam_indexed, FoamGenConfig, WALL};
use hmrf_unet::discrete::{em_icm_segment, EmIcmConfig, PenaltyKind};
use hmrf_unet::eval::dice_labels;

fn main() -> anyhow::Result<()> {
    let (image, truth) = generate_foam_indexed(&FoamGenConfig::default(), 0)?;
    for kind in [PenaltyKind::Potts, PenaltyKind::Banerjee] {
        let mut cfg = EmIcmConfig::default();
        cfg.neighborhood.kind = kind;
        let result = em_icm_segment(&image, &cfg)?;
        println!(
            "{kind:?}: Dice {:.4}, energy {:.2} after {} steps, converged {}",
            dice_labels(&result.labels, &truth, WALL)?,
            result.final_energy(),
            result.trace.len(),
            result.converged,
        );
        println!("  class means {:?}", (0..2).map(|l| result.params.mean(l)).collect::<Vec<_>>());
    }
    Ok(())
}
