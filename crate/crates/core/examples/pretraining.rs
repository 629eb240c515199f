//! Fine-tuning an unsupervised checkpoint versus supervised training from
//! scratch on the same few labeled images, with a paired signed-rank test.

use hmrf_unet::experiments::{pretraining_study, train_hmrf, StudyConfig};
use hmrf_unet::fuzzy::NeighborhoodVariant;

fn main() -> anyhow::Result<()> {
    let mut study = StudyConfig { train_images: 256, ..StudyConfig::default() };
    study.unsupervised.epochs = 8;
    study.supervised.epochs = 20;
    let data = study.data()?;

    let pretrained = train_hmrf(&study, &data, NeighborhoodVariant::Potts, 0.31, 0.05, 0)?;
    for row in pretraining_study(&study, &data, &pretrained, &[5, 10])? {
        println!(
            "{:>3} labels: fine-tuned {:.4}, scratch {:.4}, p = {:.2e}",
            row.labels, row.pretrained_dice, row.scratch_dice, row.p_value
        );
    }
    Ok(())
}
