//! Iterated inference: the forecast is fed back as the next input, and each
//! lead time is scored in physical units against the dataset and a
//! climatology.

use std::fmt::Write as _;
use std::path::Path;

use crate::autodiff::Element;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{score_state, ClimatologyTable};
use crate::model::{Pear, VolumetricState};

/// Longest supported rollout, in daily steps.
pub const MAX_LEAD_DAYS: usize = 10;

/// One forecast step on normalized states.
pub trait Forecaster {
    fn forecast(&mut self, state: &VolumetricState<f32>) -> Result<VolumetricState<f32>>;
}

impl<T: Element> Forecaster for Pear<T> {
    fn forecast(&mut self, state: &VolumetricState<f32>) -> Result<VolumetricState<f32>> {
        Ok(self.forward(&state.cast())?.cast())
    }
}

impl<F: Forecaster + ?Sized> Forecaster for &mut F {
    fn forecast(&mut self, state: &VolumetricState<f32>) -> Result<VolumetricState<f32>> {
        (**self).forecast(state)
    }
}

/// Repeats its input.
#[derive(Debug, Clone, Copy, Default)]
pub struct Persistence;

impl Forecaster for Persistence {
    fn forecast(&mut self, state: &VolumetricState<f32>) -> Result<VolumetricState<f32>> {
        Ok(state.clone())
    }
}

/// Counts the forecasts made by the wrapped model.
#[derive(Debug, Clone)]
pub struct Counting<F> {
    pub inner: F,
    calls: usize,
}

impl<F> Counting<F> {
    pub fn new(inner: F) -> Self {
        Self { inner, calls: 0 }
    }

    pub fn calls(&self) -> usize {
        self.calls
    }
}

impl<F: Forecaster> Forecaster for Counting<F> {
    fn forecast(&mut self, state: &VolumetricState<f32>) -> Result<VolumetricState<f32>> {
        self.calls += 1;
        self.inner.forecast(state)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub lead_time_days: usize,
    pub variable: &'static str,
    pub level: Option<u32>,
    /// Mean over initial states.
    pub rmse: f64,
    /// Mean over the initial states where ACC is defined.
    pub acc: Option<f64>,
    pub n_samples: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutReport {
    pub rows: Vec<MetricRow>,
    /// A forecast turned non-finite; later lead times of that start are missing.
    pub unstable: bool,
    /// (lead, start) pairs per variable row whose ACC was undefined.
    pub acc_undefined: usize,
}

impl RolloutReport {
    /// Distinct lead times in order.
    pub fn lead_times(&self) -> Vec<usize> {
        let mut out: Vec<usize> = self.rows.iter().map(|r| r.lead_time_days).collect();
        out.dedup();
        out
    }

    pub fn row(&self, lead: usize, variable: &str, level: Option<u32>) -> Option<&MetricRow> {
        self.rows.iter().find(|r| r.lead_time_days == lead && r.variable == variable && r.level == level)
    }

    /// ACC of `variable` at `lead`, averaged over its levels.
    pub fn level_mean_acc(&self, lead: usize, variable: &str) -> Option<f64> {
        let accs: Vec<f64> =
            self.rows.iter().filter(|r| r.lead_time_days == lead && r.variable == variable).filter_map(|r| r.acc).collect();
        (!accs.is_empty()).then(|| crate::metrics::level_mean(&accs))
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("lead_time_days,variable,level,rmse,acc,n_samples\n");
        for r in &self.rows {
            let level = r.level.map(|l| l.to_string()).unwrap_or_default();
            let acc = r.acc.map(|a| a.to_string()).unwrap_or_default();
            writeln!(s, "{},{},{},{},{},{}", r.lead_time_days, r.variable, level, r.rmse, acc, r.n_samples).expect("string write");
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// Rolls out `n_steps` days from each index in `starts`, scoring lead `k`
/// against step `start + k`.
pub fn evaluate<F: Forecaster>(
    model: &mut F,
    data: &Dataset,
    clim: &ClimatologyTable,
    starts: &[usize],
    n_steps: usize,
) -> Result<RolloutReport> {
    if !(1..=MAX_LEAD_DAYS).contains(&n_steps) {
        return Err(Error::Config(format!("n_steps must be in 1..={MAX_LEAD_DAYS}, got {n_steps}")));
    }
    if starts.is_empty() {
        return Err(Error::Config("no initial states".into()));
    }
    if let Some(&s) = starts.iter().find(|&&s| s + n_steps >= data.len()) {
        return Err(Error::Config(format!("start {s} + {n_steps} steps runs past {} steps of data", data.len())));
    }
    // Per lead: per row (rmse sum, acc sum, acc count, samples).
    let mut sums: Vec<Vec<(f64, f64, usize, usize)>> = Vec::new();
    let mut labels: Vec<(&'static str, Option<u32>)> = Vec::new();
    let mut unstable = false;
    let mut acc_undefined = 0;
    for &start in starts {
        let mut state = data.normalized(start);
        for lead in 1..=n_steps {
            state = model.forecast(&state)?;
            if !state.all_finite() {
                log::warn!("forecast from step {start} turned non-finite at lead {lead}; truncating");
                unstable = true;
                break;
            }
            let mut physical = state.clone();
            data.stats().denormalize(&mut physical);
            let t = start + lead;
            let (c, _) = clim.get(data.times()[t].day_of_year)?;
            let scores = score_state(&data.physical(t), &physical, c)?;
            if labels.is_empty() {
                labels = scores.iter().map(|s| (s.variable, s.level)).collect();
            }
            if sums.len() < lead {
                sums.push(vec![(0.0, 0.0, 0, 0); scores.len()]);
            }
            for (slot, s) in sums[lead - 1].iter_mut().zip(&scores) {
                slot.0 += s.rmse;
                slot.3 += 1;
                match s.acc {
                    Some(a) => {
                        slot.1 += a;
                        slot.2 += 1;
                    }
                    None => acc_undefined += 1,
                }
            }
        }
    }
    let mut rows = Vec::new();
    for (i, lead) in sums.iter().enumerate() {
        for (&(variable, level), &(rmse, acc, n_acc, n)) in labels.iter().zip(lead) {
            rows.push(MetricRow {
                lead_time_days: i + 1,
                variable,
                level,
                rmse: rmse / n as f64,
                acc: (n_acc > 0).then(|| acc / n_acc as f64),
                n_samples: n,
            });
        }
    }
    if acc_undefined > 0 {
        log::warn!("ACC undefined (zero anomaly) for {acc_undefined} scores");
    }
    Ok(RolloutReport { rows, unstable, acc_undefined })
}

/// Single initial state.
pub fn rollout<F: Forecaster>(
    model: &mut F,
    data: &Dataset,
    clim: &ClimatologyTable,
    start: usize,
    n_steps: usize,
) -> Result<RolloutReport> {
    evaluate(model, data, clim, &[start], n_steps)
}
