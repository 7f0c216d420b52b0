//! Latitude-unweighted RMSE and anomaly correlation on HEALPix fields.

use pear::data::{gen_synthetic, SyntheticConfig};
use pear::metrics::{acc, rmse, score_state, ClimatologyTable};

fn main() -> pear::Result<()> {
    let y = [1.0, 2.0, 3.0, 4.0];
    let clim = [2.5; 4];
    println!("RMSE(y, y+1) = {}", rmse(&y, &y.map(|v| v + 1.0))?);
    println!("ACC(y, y)    = {:?}", acc(&y, &y, &clim)?);
    println!("ACC(y, 2c-y) = {:?}", acc(&y, &clim.map(|c| 2.0 * c).iter().zip(&y).map(|(a, b)| a - b).collect::<Vec<_>>(), &clim)?);
    println!("ACC(c, y)    = {:?} (zero observed anomaly)", acc(&clim, &y, &clim)?);

    let data = gen_synthetic(2, &SyntheticConfig { n_side: 8, steps: 40, ..Default::default() })?;
    let table = ClimatologyTable::build(&data)?;
    let (truth, forecast) = (data.physical(20), data.physical(19));
    let (c, samples) = table.get(data.times()[20].day_of_year)?;
    println!("\nday {} climatology from {samples} samples", data.times()[20].day_of_year);
    for s in score_state(&truth, &forecast, c)?.iter().filter(|s| s.level.is_none() || s.level == Some(500)) {
        println!("  {:<4} {:>5?} RMSE {:>10.4} ACC {:.3?}", s.variable, s.level, s.rmse, s.acc);
    }
    Ok(())
}
