//! Analytic HMRF loss gradients against central differences, per variant.

use hmrf_unet::data::synth::{generate_foam_indexed, FoamGenConfig};
use hmrf_unet::fuzzy::{hmrf_loss, hmrf_loss_grad, FuzzyNeighborhoodConfig, HmrfLossConfig, LossWeights, NeighborhoodVariant};
use hmrf_unet::neighborhood::Cliques;
use hmrf_unet::types::ConfidenceMap;

fn main() -> anyhow::Result<()> {
    let foam = FoamGenConfig { height: 16, width: 16, cells: 3, ..FoamGenConfig::default() };
    let (image, _) = generate_foam_indexed(&foam, 1)?;
    let (h, w) = (image.height(), image.width());
    let n = h * w;
    // A smooth, strictly interior confidence map.
    let fg: Vec<f64> = image.values().iter().map(|y| 0.2 + 0.6 * y).collect();
    let data: Vec<f64> = fg.iter().map(|p| 1.0 - p).chain(fg.iter().copied()).collect();
    let c = ConfidenceMap::new(h, w, 2, data)?;
    let cliques = Cliques::new(h, w)?;
    let step = 1e-6;

    for variant in NeighborhoodVariant::ALL {
        let cfg = HmrfLossConfig {
            neighborhood: variant.config(FuzzyNeighborhoodConfig::default()),
            weights: LossWeights::new(0.5)?,
        };
        let (_, grad) = hmrf_loss_grad(&image, &c, &cliques, &cfg)?;
        let mut worst = 0.0f64;
        for i in (0..2 * n).step_by(7) {
            let at = |delta: f64| -> anyhow::Result<f64> {
                let mut d = c.data().to_vec();
                d[i] += delta;
                Ok(hmrf_loss(&image, &ConfidenceMap::new_unchecked(h, w, 2, d)?, &cliques, &cfg)?.total)
            };
            let numeric = (at(step)? - at(-step)?) / (2.0 * step);
            worst = worst.max((numeric - grad[i]).abs() / numeric.abs().max(grad[i].abs()).max(1e-7));
        }
        println!("{:<10} max relative error {worst:.2e}", variant.name());
    }
    Ok(())
}
