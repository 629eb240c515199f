//! Unsupervised HMRF training on synthetic foam, scored against ground truth.
//!
//! `cargo run --release --example unsupervised_training -- [images] [epochs] [variant] [lambda_n]`

use std::time::Instant;

use clap::ValueEnum;
use hmrf_unet::data::{datasets_by_split, synth_dataset, SynthDatasetConfig};
use hmrf_unet::experiments::score_model;
use hmrf_unet::fuzzy::NeighborhoodVariant;
use hmrf_unet::train::{train_unsupervised, TrainConfig};
use hmrf_unet::unet::{build_unet, NetworkConfig};

fn main() -> anyhow::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let images: usize = args.first().map_or(Ok(128), |s| s.parse())?;
    let epochs: usize = args.get(1).map_or(Ok(5), |s| s.parse())?;
    let variant = match args.get(2) {
        Some(s) => NeighborhoodVariant::from_str(s, true).map_err(anyhow::Error::msg)?,
        None => NeighborhoodVariant::Potts,
    };
    let lambda_n: f64 = args.get(3).map_or(Ok(0.31), |s| s.parse())?;

    let (samples, _) = synth_dataset(&SynthDatasetConfig { train: images, val: 0, test: 32, ..Default::default() })?;
    let [train, _, test] = datasets_by_split(&samples)?;
    let cfg = TrainConfig { epochs, lambda_n, neighborhood: variant, ..Default::default() };

    let start = Instant::now();
    let (weights, log) = train_unsupervised(build_unet(&NetworkConfig::default(), cfg.seed)?, &train, &cfg, None, None)?;
    println!("{} images, {epochs} epochs in {:.1}s", train.len(), start.elapsed().as_secs_f64());
    print!("{}", log.to_csv());

    let score = score_model(&weights, &test)?;
    println!("test Dice {:.4} at threshold {:.2}", score.mean_dice(), score.threshold());
    println!("thin-wall recall {:.4}", score.thin_wall_recall);
    Ok(())
}
