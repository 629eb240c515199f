//! Small neighborhood and sigma_thresh sweeps; the full-size versions run
//! through `hmrf study`.

use hmrf_unet::experiments::{
    neighborhood_csv, neighborhood_medians, sigma_csv, sigma_means, neighborhood_study, sigma_study, StudyConfig,
};
use hmrf_unet::fuzzy::NeighborhoodVariant;

fn main() -> anyhow::Result<()> {
    let mut study = StudyConfig { train_images: 128, test_images: 32, seeds: vec![0], ..StudyConfig::default() };
    study.unsupervised.epochs = 5;
    let data = study.data()?;

    let rows = neighborhood_study(&study, &data, &[NeighborhoodVariant::Potts, NeighborhoodVariant::Banerjee], &[0.0, 0.31])?;
    print!("{}", neighborhood_csv(&rows));
    for (variant, lambda_n, dice) in neighborhood_medians(&rows) {
        println!("median {:<9} lambda_n {lambda_n:.2}: {dice:.4}", variant.name());
    }

    let rows = sigma_study(&study, &data, 0.56, &[0.05, 0.2])?;
    print!("{}", sigma_csv(&rows));
    for (sigma, recall) in sigma_means(&rows) {
        println!("sigma_thresh {sigma:.2}: thin-wall recall {recall:.4}");
    }
    Ok(())
}
