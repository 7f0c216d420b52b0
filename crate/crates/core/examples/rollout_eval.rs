//! Ten-day rollouts of a model and of persistence, scored against a
//! day-of-year climatology.

use pear::data::{gen_synthetic, SyntheticConfig};
use pear::metrics::ClimatologyTable;
use pear::model::{ModelConfig, Pear};
use pear::rollout::{evaluate, Counting, Persistence, RolloutReport};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn show(name: &str, r: &RolloutReport) {
    println!("{name}");
    for lead in r.lead_times() {
        let get = |v, l| r.row(lead, v, l).map_or(f64::NAN, |row| row.rmse);
        println!("  lead {lead:>2}: z500 RMSE {:>8.2}, t2m RMSE {:.3}, z ACC {:.3?}", get("z", Some(500)), get("t2m", None), r.level_mean_acc(lead, "z"));
    }
}

fn main() -> pear::Result<()> {
    let data = gen_synthetic(1, &SyntheticConfig { n_side: 8, steps: 48, ..Default::default() })?;
    let clim = ClimatologyTable::build(&data)?;
    let starts = [0, 12, 24];

    let report = evaluate(&mut Persistence, &data, &clim, &starts, 10)?;
    show("persistence", &report);

    let model = Pear::<f32>::new(ModelConfig::desk(), &mut ChaCha8Rng::seed_from_u64(0))?;
    let mut counted = Counting::new(model);
    let report = evaluate(&mut counted, &data, &clim, &starts, 10)?;
    show("untrained model", &report);
    println!("{} forward passes, unstable {}", counted.calls(), report.unstable);
    print!("{}", report.to_csv().lines().take(3).collect::<Vec<_>>().join("\n"));
    println!();
    Ok(())
}
