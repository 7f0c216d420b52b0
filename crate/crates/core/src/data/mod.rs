//! Datasets of volumetric states, their on-disk format, normalization,
//! lat-lon resampling and the synthetic generator.

pub mod resample;
pub mod stf;
pub mod synthetic;

use std::ops::Range;
use std::path::Path;

pub use resample::{hpx_to_latlon, latlon_to_hpx, write_csv, write_pgm, LatLonGrid};
pub use stf::{GridKind, NormStat, SphereTensorFile, StfHeader, TimeTag, Variable};
pub use synthetic::{gen_synthetic, Pattern, SyntheticConfig};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::hpx::GridSpec;
use crate::model::{VolumetricState, PRESSURE_LEVELS, SURFACE_VARIABLES, UPPER_VARIABLES};

pub const SURFACE_UNITS: [&str; 4] = ["m s-1", "m s-1", "K", "Pa"];
pub const UPPER_UNITS: [&str; 5] = ["kg kg-1", "K", "m s-1", "m s-1", "m2 s-2"];

const NS: usize = SURFACE_VARIABLES.len();
const NU: usize = UPPER_VARIABLES.len();
const NL: usize = PRESSURE_LEVELS.len();

/// Per-variable mean and standard deviation, pooled over pixels, times and
/// (for upper-air variables) levels.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalization {
    pub surface: Vec<NormStat>,
    pub upper: Vec<NormStat>,
}

fn pooled_stats(values: &[f32], channels: usize) -> Vec<NormStat> {
    let mut sum = vec![0.0f64; channels];
    let mut sq = vec![0.0f64; channels];
    for (i, v) in values.iter().enumerate() {
        sum[i % channels] += *v as f64;
    }
    let count = (values.len() / channels).max(1) as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
    for (i, v) in values.iter().enumerate() {
        sq[i % channels] += (*v as f64 - mean[i % channels]).powi(2);
    }
    mean.iter()
        .zip(sq)
        .map(|(&mean, s)| {
            let std = (s / count).sqrt();
            // Constant variables keep their scale instead of dividing by zero.
            NormStat { mean, std: if std > 1e-12 * mean.abs().max(1.0) { std } else { 1.0 } }
        })
        .collect()
}

impl Normalization {
    pub fn from_fields(surface: &[f32], upper: &[f32]) -> Self {
        Self { surface: pooled_stats(surface, NS), upper: pooled_stats(upper, NU) }
    }

    fn apply(values: &mut [f32], stats: &[NormStat], forward: bool) {
        let c = stats.len();
        for (i, v) in values.iter_mut().enumerate() {
            let s = stats[i % c];
            let x = *v as f64;
            *v = if forward { (x - s.mean) / s.std } else { x * s.std + s.mean } as f32;
        }
    }

    pub fn normalize(&self, state: &mut VolumetricState<f32>) {
        Self::apply(state.surface.data_mut(), &self.surface, true);
        Self::apply(state.upper.data_mut(), &self.upper, true);
    }

    pub fn denormalize(&self, state: &mut VolumetricState<f32>) {
        Self::apply(state.surface.data_mut(), &self.surface, false);
        Self::apply(state.upper.data_mut(), &self.upper, false);
    }
}

/// A time sequence of states on one HEALPix grid, held in physical units.
#[derive(Debug, Clone)]
pub struct Dataset {
    spec: GridSpec,
    /// `(T, N, 4)`.
    surface: Vec<f32>,
    /// `(T, N, 13, 5)`.
    upper: Vec<f32>,
    times: Vec<TimeTag>,
    stats: Normalization,
}

impl Dataset {
    /// Builds a dataset; statistics default to those of the data itself.
    pub fn new(spec: GridSpec, surface: Vec<f32>, upper: Vec<f32>, times: Vec<TimeTag>, stats: Option<Normalization>) -> Result<Self> {
        let n = spec.n_pix() as usize;
        let t = times.len();
        if surface.len() != t * n * NS || upper.len() != t * n * NL * NU {
            return Err(Error::dim(
                "dataset",
                format!("{t} steps at n_side {} vs {} surface and {} upper values", spec.n_side(), surface.len(), upper.len()),
            ));
        }
        let stats = stats.unwrap_or_else(|| Normalization::from_fields(&surface, &upper));
        Ok(Self { spec, surface, upper, times, stats })
    }

    pub fn spec(&self) -> GridSpec {
        self.spec
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn times(&self) -> &[TimeTag] {
        &self.times
    }

    pub fn stats(&self) -> &Normalization {
        &self.stats
    }

    pub fn with_stats(mut self, stats: Normalization) -> Self {
        self.stats = stats;
        self
    }

    /// Consecutive steps `range`, keeping the statistics.
    pub fn slice(&self, range: Range<usize>) -> Result<Self> {
        if range.end > self.len() || range.start >= range.end {
            return Err(Error::Config(format!("slice {range:?} of {} steps", self.len())));
        }
        let n = self.spec.n_pix() as usize;
        let (s, u) = (n * NS, n * NL * NU);
        Ok(Self {
            spec: self.spec,
            surface: self.surface[range.start * s..range.end * s].to_vec(),
            upper: self.upper[range.start * u..range.end * u].to_vec(),
            times: self.times[range].to_vec(),
            stats: self.stats.clone(),
        })
    }

    /// Splits at step `at`; both parts use statistics of the first part.
    pub fn split(&self, at: usize) -> Result<(Self, Self)> {
        let head = self.slice(0..at)?;
        let stats = Normalization::from_fields(&head.surface, &head.upper);
        let tail = self.slice(at..self.len())?.with_stats(stats.clone());
        Ok((head.with_stats(stats), tail))
    }

    /// State at step `t` in physical units.
    pub fn physical(&self, t: usize) -> VolumetricState<f32> {
        let n = self.spec.n_pix() as usize;
        let (s, u) = (n * NS, n * NL * NU);
        VolumetricState {
            surface: Tensor::new(vec![n, NS], self.surface[t * s..(t + 1) * s].to_vec()).expect("surface extents"),
            upper: Tensor::new(vec![n, NL, NU], self.upper[t * u..(t + 1) * u].to_vec()).expect("upper extents"),
        }
    }

    /// State at step `t` in normalized units.
    pub fn normalized(&self, t: usize) -> VolumetricState<f32> {
        let mut state = self.physical(t);
        self.stats.normalize(&mut state);
        state
    }

    /// Number of (t, t+1) training pairs.
    pub fn pairs(&self) -> usize {
        self.len().saturating_sub(1)
    }

    fn headers(&self) -> (StfHeader, StfHeader) {
        let n = self.spec.n_pix() as usize;
        let vars = |names: &[&str], units: &[&str]| {
            names.iter().zip(units).map(|(n, u)| Variable { name: n.to_string(), units: u.to_string() }).collect()
        };
        let grid = GridKind::Healpix { n_side: self.spec.n_side() };
        let surface = StfHeader {
            grid: grid.clone(),
            shape: vec![self.len(), n, NS],
            variables: vars(&SURFACE_VARIABLES, &SURFACE_UNITS),
            levels_hpa: vec![],
            normalization: self.stats.surface.clone(),
            times: self.times.clone(),
        };
        let upper = StfHeader {
            grid,
            shape: vec![self.len(), n, NL, NU],
            variables: vars(&UPPER_VARIABLES, &UPPER_UNITS),
            levels_hpa: PRESSURE_LEVELS.to_vec(),
            normalization: self.stats.upper.clone(),
            times: self.times.clone(),
        };
        (surface, upper)
    }

    /// Writes `surface.stf` and `upper.stf` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let (hs, hu) = self.headers();
        SphereTensorFile::new(hs, self.surface.clone())?.save(dir.join("surface.stf"))?;
        SphereTensorFile::new(hu, self.upper.clone())?.save(dir.join("upper.stf"))?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let s = SphereTensorFile::load(dir.join("surface.stf"))?;
        let u = SphereTensorFile::load(dir.join("upper.stf"))?;
        let GridKind::Healpix { n_side } = s.header.grid else {
            return Err(Error::Format("dataset files must be on a HEALPix grid".into()));
        };
        if u.header.grid != s.header.grid || u.header.times != s.header.times {
            return Err(Error::Format("surface and upper files disagree on grid or times".into()));
        }
        let stats = if s.header.normalization.len() == NS && u.header.normalization.len() == NU {
            Some(Normalization { surface: s.header.normalization.clone(), upper: u.header.normalization.clone() })
        } else {
            None
        };
        Self::new(GridSpec::from_nside(n_side)?, s.data, u.data, s.header.times, stats)
    }
}

/// `w · mean|Δ surface| + mean|Δ upper|`, accumulated in f64.
pub fn weighted_l1(pred: &VolumetricState<f32>, target: &VolumetricState<f32>, surface_weight: f64) -> Result<f64> {
    if pred.surface.shape() != target.surface.shape() || pred.upper.shape() != target.upper.shape() {
        return Err(Error::dim("loss", "prediction and target shapes differ"));
    }
    let mean_abs = |a: &Tensor<f32>, b: &Tensor<f32>| {
        a.data().iter().zip(b.data()).map(|(x, y)| (*x as f64 - *y as f64).abs()).sum::<f64>() / a.len() as f64
    };
    Ok(surface_weight * mean_abs(&pred.surface, &target.surface) + mean_abs(&pred.upper, &target.upper))
}

/// Mean normalized loss of forecasting "no change" over all consecutive pairs.
pub fn persistence_l1(data: &Dataset, surface_weight: f64) -> Result<f64> {
    if data.pairs() == 0 {
        return Err(Error::Config("persistence needs at least two steps".into()));
    }
    let mut total = 0.0;
    for t in 0..data.pairs() {
        total += weighted_l1(&data.normalized(t), &data.normalized(t + 1), surface_weight)?;
    }
    Ok(total / data.pairs() as f64)
}
