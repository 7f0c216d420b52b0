//! Synthetic dataset: generation, normalization statistics and the on-disk
//! round trip.

use pear::data::{gen_synthetic, persistence_l1, Dataset, SyntheticConfig};
use pear::model::{SURFACE_VARIABLES, UPPER_VARIABLES};

fn main() -> pear::Result<()> {
    let data = gen_synthetic(0, &SyntheticConfig { n_side: 8, steps: 32, ..Default::default() })?;
    println!("{} steps at n_side {}, {} training pairs", data.len(), data.spec().n_side(), data.pairs());
    for (name, stat) in SURFACE_VARIABLES.iter().chain(&UPPER_VARIABLES).zip(data.stats().surface.iter().chain(&data.stats().upper)) {
        println!("  {name:<4} mean {:>12.4} std {:>10.4}", stat.mean, stat.std);
    }
    println!("persistence L1 (normalized) {:.4}", persistence_l1(&data, 0.25)?);

    let dir = tempfile::tempdir()?;
    data.save(dir.path())?;
    let back = Dataset::load(dir.path())?;
    println!("reloaded {} steps, identical: {}", back.len(), back.physical(5) == data.physical(5));
    Ok(())
}
