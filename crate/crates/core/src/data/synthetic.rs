//! Synthetic weather-like sequences: smooth random patterns on the sphere,
//! rotated about the polar axis at a constant angular velocity, plus noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::stf::{NormStat, TimeTag};
use super::Dataset;
use crate::error::{Error, Result};
use crate::hpx::{GridSpec, PixelIndex};
use crate::model::{PRESSURE_LEVELS, SURFACE_VARIABLES, UPPER_VARIABLES};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub n_side: u64,
    pub steps: usize,
    /// Rotation per step, radians eastwards.
    pub omega: f64,
    /// Noise standard deviation relative to each variable's spread.
    pub noise: f64,
    /// Days per synthetic year; day-of-year cycles through `1..=year_length`.
    pub year_length: u32,
    /// Highest polynomial degree and azimuthal order of the patterns.
    pub max_degree: u32,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self { n_side: 8, steps: 96, omega: 0.1, noise: 0.01, year_length: 16, max_degree: 3 }
    }
}

/// `Σ a z^n sin^m θ cos mφ + b z^n sin^m θ sin mφ` over `n, m <= max_degree`,
/// scaled to unit RMS over the sphere.
#[derive(Debug, Clone)]
pub struct Pattern {
    terms: Vec<(i32, i32, f64, f64)>,
    scale: f64,
}

impl Pattern {
    pub fn random<R: Rng>(rng: &mut R, max_degree: u32) -> Self {
        let mut terms = Vec::new();
        for n in 0..=max_degree as i32 {
            for m in 0..=max_degree as i32 {
                let a: f64 = rng.sample(StandardNormal);
                let b: f64 = if m == 0 { 0.0 } else { rng.sample(StandardNormal) };
                terms.push((n, m, a, b));
            }
        }
        let mut pattern = Self { terms, scale: 1.0 };
        // RMS over an equal-area sample, independent of the target grid.
        let sample = GridSpec::from_nside(16).expect("valid level");
        let mut sum = 0.0;
        for p in 0..sample.n_pix() {
            let c = sample.pixel_center(PixelIndex::nested(p)).expect("in range");
            sum += pattern.eval(c.theta, c.phi).powi(2);
        }
        let rms = (sum / sample.n_pix() as f64).sqrt();
        pattern.scale = if rms > 0.0 { 1.0 / rms } else { 1.0 };
        pattern
    }

    pub fn eval(&self, theta: f64, phi: f64) -> f64 {
        let (z, s) = (theta.cos(), theta.sin());
        let mut v = 0.0;
        for &(n, m, a, b) in &self.terms {
            let r = z.powi(n) * s.powi(m);
            let mf = m as f64 * phi;
            v += r * (a * mf.cos() + b * mf.sin());
        }
        v * self.scale
    }
}

/// Typical (mean, spread) of each surface variable.
fn surface_climate(v: usize) -> NormStat {
    let (mean, std) = match v {
        0 => (0.0, 5.0),
        1 => (0.0, 4.0),
        2 => (288.0, 15.0),
        _ => (101_325.0, 1000.0),
    };
    NormStat { mean, std }
}

/// Typical (mean, spread) of an upper-air variable at a pressure level.
fn upper_climate(v: usize, hpa: u32) -> NormStat {
    let p = hpa as f64 / 1000.0;
    let (mean, std) = match v {
        0 => {
            let q = 0.012 * p.powi(3);
            (q, 0.5 * q + 1e-6)
        }
        1 => (200.0 + 88.0 * p.powf(0.3), 8.0),
        2 => (2.0 + 10.0 * (1.0 - p), 8.0),
        3 => (0.0, 5.0),
        _ => {
            let z = 1000.0 + 7000.0 * 9.80665 * (1.0 / p).ln();
            (z, 300.0 + 0.02 * z)
        }
    };
    NormStat { mean, std }
}

/// Generates a sequence in physical units. Normalization statistics are
/// computed from the sequence itself.
pub fn gen_synthetic(seed: u64, cfg: &SyntheticConfig) -> Result<Dataset> {
    if cfg.steps < 2 {
        return Err(Error::Config(format!("a sequence needs at least 2 steps, got {}", cfg.steps)));
    }
    if cfg.year_length == 0 || cfg.year_length > 366 {
        return Err(Error::Config(format!("year_length {} outside 1..=366", cfg.year_length)));
    }
    let spec = GridSpec::from_nside(cfg.n_side)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_pix = spec.n_pix() as usize;
    let (ns, nu, nl) = (SURFACE_VARIABLES.len(), UPPER_VARIABLES.len(), PRESSURE_LEVELS.len());

    let surface_patterns: Vec<Pattern> = (0..ns).map(|_| Pattern::random(&mut rng, cfg.max_degree)).collect();
    let upper_shared: Vec<Pattern> = (0..nu).map(|_| Pattern::random(&mut rng, cfg.max_degree)).collect();
    let upper_level: Vec<Pattern> = (0..nu * nl).map(|_| Pattern::random(&mut rng, cfg.max_degree)).collect();
    let centers: Vec<(f64, f64)> = (0..n_pix as u64)
        .map(|p| spec.pixel_center(PixelIndex::nested(p)).map(|c| (c.theta, c.phi)))
        .collect::<Result<_>>()?;

    let mut surface = Vec::with_capacity(cfg.steps * n_pix * ns);
    let mut upper = Vec::with_capacity(cfg.steps * n_pix * nl * nu);
    let mut times = Vec::with_capacity(cfg.steps);
    for t in 0..cfg.steps {
        let shift = cfg.omega * t as f64;
        for &(theta, phi) in &centers {
            let phi = phi - shift;
            for (v, pat) in surface_patterns.iter().enumerate() {
                let c = surface_climate(v);
                let noise: f64 = rng.sample(StandardNormal);
                surface.push((c.mean + c.std * (pat.eval(theta, phi) + cfg.noise * noise)) as f32);
            }
            for (l, &hpa) in PRESSURE_LEVELS.iter().enumerate() {
                for v in 0..nu {
                    let c = upper_climate(v, hpa);
                    let anomaly = upper_shared[v].eval(theta, phi) + 0.3 * upper_level[v * nl + l].eval(theta, phi);
                    let noise: f64 = rng.sample(StandardNormal);
                    upper.push((c.mean + c.std * (anomaly + cfg.noise * noise)) as f32);
                }
            }
        }
        times.push(TimeTag { step: t as u64, day_of_year: (t as u32 % cfg.year_length) + 1 });
    }
    Dataset::new(spec, surface, upper, times, None)
}
