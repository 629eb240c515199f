//! Cuboid split arithmetic at full scale, then a small synthetic dataset
//! written to disk in the layout the CLI reads.

use hmrf_unet::data::split::{cuboid_split, Split, SplitConfig};
use hmrf_unet::data::{load_split, synth_dataset, write_dataset, SynthDatasetConfig};

fn main() -> anyhow::Result<()> {
    let cfg = SplitConfig { assignment: (7, 1, 1), ..SplitConfig::default() };
    let plan = cuboid_split(1300, 951, 960, &cfg)?;
    println!("{} cuboids of {} slices", plan.cuboids.len(), plan.cuboids[0].slices.len());
    println!("{} full-size test slices, {} discarded", plan.fullsize_test.len(), plan.discarded.len());
    for split in Split::ALL {
        println!("  {:<5} {:>6} samples", split.name(), plan.sample_count(split));
    }

    let out = std::env::args().nth(1).unwrap_or_else(|| "foam_data".into());
    let data = SynthDatasetConfig { train: 32, val: 4, test: 8, augmentations: 2, ..SynthDatasetConfig::default() };
    let (samples, manifest) = synth_dataset(&data)?;
    write_dataset(out.as_ref(), &samples, &manifest)?;
    let (names, test) = load_split(out.as_ref(), Split::Test)?;
    println!("wrote {} samples to {out}; test split has {} images, first {}", samples.len(), test.len(), names[0]);
    Ok(())
}
