//! HMRF loss of every neighborhood variant on a foam slice, evaluated for the
//! one-hot ground truth, a blurred version of it and a flat map.

use hmrf_unet::data::synth::{generate_foam_indexed, FoamGenConfig};
use hmrf_unet::fuzzy::{hmrf_loss, FuzzyNeighborhoodConfig, HmrfLossConfig, LossWeights, NeighborhoodVariant};
use hmrf_unet::neighborhood::Cliques;
use hmrf_unet::types::{one_hot, ConfidenceMap};

fn main() -> anyhow::Result<()> {
    let (image, truth) = generate_foam_indexed(&FoamGenConfig::default(), 3)?;
    let (h, w) = (image.height(), image.width());
    let sharp = one_hot(&truth);
    let blurred = ConfidenceMap::new(h, w, 2, sharp.data().iter().map(|p| 0.15 + 0.7 * p).collect())?;
    let flat = ConfidenceMap::constant(h, w, &[0.5, 0.5])?;
    let cliques = Cliques::new(h, w)?;

    println!("{:<10} {:>12} {:>12} {:>12}", "variant", "one-hot", "blurred", "flat");
    for variant in NeighborhoodVariant::ALL {
        let cfg = HmrfLossConfig {
            neighborhood: variant.config(FuzzyNeighborhoodConfig::default()),
            weights: LossWeights::new(0.31)?,
        };
        let loss = |c: &ConfidenceMap| hmrf_loss(&image, c, &cliques, &cfg).map(|b| b.total);
        println!("{:<10} {:>12.5} {:>12.5} {:>12.5}", variant.name(), loss(&sharp)?, loss(&blurred)?, loss(&flat)?);
    }
    Ok(())
}
