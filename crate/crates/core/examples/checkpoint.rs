//! Saving and restoring a trained model; predictions survive the round trip.

use hmrf_unet::data::{datasets_by_split, synth_dataset, SynthDatasetConfig};
use hmrf_unet::train::{train_unsupervised, TrainConfig};
use hmrf_unet::unet::{build_unet, predict, ModelWeights, NetworkConfig};

fn main() -> anyhow::Result<()> {
    let (samples, _) = synth_dataset(&SynthDatasetConfig { train: 32, val: 0, test: 4, ..Default::default() })?;
    let [train, _, test] = datasets_by_split(&samples)?;
    let cfg = TrainConfig { epochs: 2, ..Default::default() };
    let (weights, _) = train_unsupervised(build_unet(&NetworkConfig::default(), 0)?, &train, &cfg, None, None)?;

    let dir = tempfile::tempdir()?;
    let path = dir.path().join("model.ckpt");
    weights.save(&path)?;
    let restored = ModelWeights::load(&path)?;
    println!(
        "{} parameters, {} bytes on disk, provenance {:?}",
        restored.parameter_count(),
        std::fs::metadata(&path)?.len(),
        restored.provenance
    );
    let same = predict(&weights, &test.images)? == predict(&restored, &test.images)?;
    println!("identical predictions after reload: {same}");
    Ok(())
}
