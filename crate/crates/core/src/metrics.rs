//! Verification scores on HEALPix fields. Pixels have equal area, so every
//! aggregate is an unweighted mean over pixels.

use crate::autodiff::Tensor;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{VolumetricState, PRESSURE_LEVELS, SURFACE_VARIABLES, UPPER_VARIABLES};

fn check_len(context: &str, a: usize, b: usize) -> Result<()> {
    if a != b || a == 0 {
        return Err(Error::dim(context, format!("{a} vs {b} values")));
    }
    Ok(())
}

/// Root mean square difference over all pixels.
pub fn rmse(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    check_len("rmse", y.len(), y_hat.len())?;
    let sq: f64 = y.iter().zip(y_hat).map(|(a, b)| (a - b).powi(2)).sum();
    Ok((sq / y.len() as f64).sqrt())
}

/// Anomaly correlation against a climatology. `None` when either anomaly
/// has zero norm.
pub fn acc(y: &[f64], y_hat: &[f64], clim: &[f64]) -> Result<Option<f64>> {
    check_len("acc", y.len(), y_hat.len())?;
    check_len("acc climatology", y.len(), clim.len())?;
    let (mut num, mut ny, mut nh) = (0.0, 0.0, 0.0);
    for ((a, b), c) in y.iter().zip(y_hat).zip(clim) {
        let (da, db) = (a - c, b - c);
        num += da * db;
        ny += da * da;
        nh += db * db;
    }
    if ny == 0.0 || nh == 0.0 {
        return Ok(None);
    }
    Ok(Some((num / (ny * nh).sqrt()).clamp(-1.0, 1.0)))
}

pub fn level_mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Channel `c` of every pixel of an `(N, ..., C)` tensor with `stride`
/// values per pixel.
fn column(t: &Tensor<f32>, stride: usize, c: usize) -> Vec<f64> {
    t.data().chunks(stride).map(|px| px[c] as f64).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Score {
    pub variable: &'static str,
    /// Pressure level in hPa for upper-air variables.
    pub level: Option<u32>,
    pub rmse: f64,
    pub acc: Option<f64>,
}

/// RMSE and ACC for every surface variable and every (upper variable, level).
pub fn score_state(truth: &VolumetricState<f32>, pred: &VolumetricState<f32>, clim: &VolumetricState<f32>) -> Result<Vec<Score>> {
    for (name, a, b) in [("prediction", pred, truth), ("climatology", clim, truth)] {
        if a.surface.shape() != b.surface.shape() || a.upper.shape() != b.upper.shape() {
            return Err(Error::dim("score", format!("{name} grid differs from the truth")));
        }
    }
    let (ns, nu, nl) = (SURFACE_VARIABLES.len(), UPPER_VARIABLES.len(), PRESSURE_LEVELS.len());
    let mut out = Vec::with_capacity(ns + nu * nl);
    for (c, &variable) in SURFACE_VARIABLES.iter().enumerate() {
        let (y, h, k) = (column(&truth.surface, ns, c), column(&pred.surface, ns, c), column(&clim.surface, ns, c));
        out.push(Score { variable, level: None, rmse: rmse(&y, &h)?, acc: acc(&y, &h, &k)? });
    }
    for (v, &variable) in UPPER_VARIABLES.iter().enumerate() {
        for (l, &hpa) in PRESSURE_LEVELS.iter().enumerate() {
            let c = l * nu + v;
            let stride = nl * nu;
            let (y, h, k) = (column(&truth.upper, stride, c), column(&pred.upper, stride, c), column(&clim.upper, stride, c));
            out.push(Score { variable, level: Some(hpa), rmse: rmse(&y, &h)?, acc: acc(&y, &h, &k)? });
        }
    }
    Ok(out)
}

/// Mean physical state per day of year (1..=366).
#[derive(Debug, Clone)]
pub struct ClimatologyTable {
    days: Vec<Option<VolumetricState<f32>>>,
    counts: Vec<usize>,
}

impl ClimatologyTable {
    /// Averages the samples of `data` that share a day of year.
    pub fn build(data: &Dataset) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::Config("climatology needs at least one sample".into()));
        }
        let mut sums: Vec<Option<(Vec<f64>, Vec<f64>)>> = vec![None; 367];
        let mut counts = vec![0usize; 367];
        for (t, tag) in data.times().iter().enumerate() {
            let day = tag.day_of_year as usize;
            if !(1..=366).contains(&day) {
                return Err(Error::Config(format!("day of year {day} outside 1..=366")));
            }
            let s = data.physical(t);
            let slot = sums[day].get_or_insert_with(|| (vec![0.0; s.surface.len()], vec![0.0; s.upper.len()]));
            slot.0.iter_mut().zip(s.surface.data()).for_each(|(a, v)| *a += *v as f64);
            slot.1.iter_mut().zip(s.upper.data()).for_each(|(a, v)| *a += *v as f64);
            counts[day] += 1;
        }
        let template = data.physical(0);
        let days = sums
            .into_iter()
            .zip(&counts)
            .map(|(sum, &n)| {
                sum.map(|(s, u)| VolumetricState {
                    surface: Tensor::new(template.surface.shape().to_vec(), s.iter().map(|v| (v / n as f64) as f32).collect())
                        .expect("surface extents"),
                    upper: Tensor::new(template.upper.shape().to_vec(), u.iter().map(|v| (v / n as f64) as f32).collect())
                        .expect("upper extents"),
                })
            })
            .collect();
        Ok(Self { days, counts })
    }

    /// Samples that went into `day`.
    pub fn count(&self, day: u32) -> usize {
        self.counts.get(day as usize).copied().unwrap_or(0)
    }

    /// Climatology for `day`, with the day actually used. Day 366 falls back
    /// to day 365; any other empty day falls back to the nearest filled day
    /// on the annual cycle, with a warning.
    pub fn get(&self, day: u32) -> Result<(&VolumetricState<f32>, u32)> {
        if !(1..=366).contains(&day) {
            return Err(Error::Config(format!("day of year {day} outside 1..=366")));
        }
        if let Some(s) = &self.days[day as usize] {
            return Ok((s, day));
        }
        if day == 366 {
            if let Some(s) = &self.days[365] {
                return Ok((s, 365));
            }
        }
        let filled = (1..=366u32).filter(|d| self.days[*d as usize].is_some());
        let nearest = filled
            .min_by_key(|d| {
                let gap = d.abs_diff(day);
                (gap.min(366 - gap), *d)
            })
            .ok_or_else(|| Error::Config("empty climatology".into()))?;
        log::warn!("no climatology for day {day}; using day {nearest}");
        Ok((self.days[nearest as usize].as_ref().expect("filled day"), nearest))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rmse_of_constant_offset() {
        let y = [1.0, -2.0, 0.5, 4.0];
        let shifted: Vec<f64> = y.iter().map(|v| v + 1.5).collect();
        assert_eq!(rmse(&y, &y).unwrap(), 0.0);
        assert!((rmse(&y, &shifted).unwrap() - 1.5).abs() < 1e-15);
        assert!(rmse(&y, &y[..3]).is_err());
    }

    #[test]
    fn acc_limits() {
        let clim = [0.0, 1.0, 2.0, 3.0];
        let y = [1.0, 0.0, 4.0, 3.5];
        let neg: Vec<f64> = y.iter().zip(&clim).map(|(a, c)| 2.0 * c - a).collect();
        assert!((acc(&y, &y, &clim).unwrap().unwrap() - 1.0).abs() < 1e-15);
        assert!((acc(&y, &neg, &clim).unwrap().unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(acc(&clim, &y, &clim).unwrap(), None);
    }

    #[test]
    fn level_means() {
        let levels: Vec<f64> = (0..13).map(f64::from).collect();
        assert_eq!(level_mean(&levels), 6.0);
        assert_eq!(level_mean(&[2.5; 13]), 2.5);
    }
}
