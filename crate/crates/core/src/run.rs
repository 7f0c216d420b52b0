//! End-to-end workflows behind the command line: each reads a [`RunConfig`]
//! and writes its outputs under a run directory.
//!
//! ```text
//! <run_dir>/config.toml          snapshot of the effective configuration
//! <run_dir>/loss.csv             step,train_loss,val_loss
//! <run_dir>/checkpoints/*.ckpt   step_NNNNNNN, final, last_good
//! <run_dir>/metrics.csv          eval over validation starts
//! <run_dir>/rollout_sNNNN.csv    single-start rollout
//! <run_dir>/rasters/*.pgm        lat-lon projections of forecasts
//! ```

use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::data::{
    gen_synthetic, hpx_to_latlon, latlon_to_hpx, persistence_l1, write_csv, write_pgm, Dataset, GridKind,
    LatLonGrid, SphereTensorFile,
};
use crate::error::{Error, Result};
use crate::hpx::GridSpec;
use crate::metrics::ClimatologyTable;
use crate::model::{Pear, VolumetricState, SURFACE_VARIABLES};
use crate::rollout::{evaluate, Forecaster, RolloutReport};
use crate::train::{load_model_file, mean_loss, Precision, TrainSummary, Trainer};

/// The configured dataset directory, or the synthetic sequence for the seed.
pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let data = match &cfg.data.dir {
        Some(dir) => Dataset::load(dir)?,
        None => gen_synthetic(cfg.train.seed, &cfg.data.synthetic)?,
    };
    if data.spec().n_side() != cfg.model.n_side {
        return Err(Error::Config(format!("dataset n_side {} but model n_side {}", data.spec().n_side(), cfg.model.n_side)));
    }
    Ok(data)
}

/// Training and validation splits, both normalized with training statistics.
pub fn splits(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    let data = load_dataset(cfg)?;
    let at = cfg.data.train_steps;
    if at < 2 || at + 2 > data.len() {
        return Err(Error::Config(format!(
            "train_steps {at} must leave at least 2 training and 2 validation steps of {}",
            data.len()
        )));
    }
    data.split(at)
}

pub fn checkpoint_dir(run_dir: &Path) -> PathBuf {
    run_dir.join("checkpoints")
}

pub fn final_checkpoint(run_dir: &Path) -> PathBuf {
    checkpoint_dir(run_dir).join("final.ckpt")
}

/// Trains (or resumes) and snapshots the configuration.
pub fn train(cfg: &RunConfig, run_dir: &Path, resume: Option<&Path>) -> Result<TrainSummary> {
    cfg.snapshot(run_dir)?;
    let (train, val) = splits(cfg)?;
    log::info!(
        "training {} parameters on {} pairs, validating on {}",
        cfg.model.parameter_count()?,
        train.pairs(),
        val.pairs()
    );
    match cfg.train.precision {
        Precision::F32 => fit::<f32>(cfg, &train, &val, run_dir, resume),
        Precision::F64 => fit::<f64>(cfg, &train, &val, run_dir, resume),
    }
}

fn fit<T: crate::autodiff::Element>(
    cfg: &RunConfig,
    train: &Dataset,
    val: &Dataset,
    run_dir: &Path,
    resume: Option<&Path>,
) -> Result<TrainSummary> {
    let mut trainer = match resume {
        Some(p) => Trainer::<T>::resume(cfg.model.clone(), cfg.train.clone(), p)?,
        None => Trainer::<T>::init(cfg.model.clone(), cfg.train.clone())?,
    };
    trainer.fit(train, Some(val), Some(run_dir))
}

#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub report: RolloutReport,
    pub val_loss: f64,
    pub persistence_loss: f64,
}

fn starts(cfg: &RunConfig, val: &Dataset) -> Result<Vec<usize>> {
    let lead = cfg.eval.lead_days;
    if val.len() <= lead {
        return Err(Error::Config(format!("validation split of {} steps is too short for {lead}-day leads", val.len())));
    }
    Ok((0..val.len() - lead).step_by(cfg.eval.start_stride).collect())
}

/// One-step validation loss and a multi-start rollout written to `metrics.csv`.
pub fn eval(cfg: &RunConfig, run_dir: &Path, checkpoint: &Path) -> Result<EvalOutcome> {
    let (train, val) = splits(cfg)?;
    let mut model = load_model_file::<f32>(cfg.model.clone(), checkpoint)?;
    let w = cfg.train.surface_loss_weight;
    let val_loss = mean_loss(&model, &val, val.pairs(), w)?;
    let persistence_loss = persistence_l1(&val, w)?;
    let clim = ClimatologyTable::build(&train)?;
    let report = evaluate(&mut model, &val, &clim, &starts(cfg, &val)?, cfg.eval.lead_days)?;
    std::fs::create_dir_all(run_dir)?;
    report.write_csv(run_dir.join("metrics.csv"))?;
    Ok(EvalOutcome { report, val_loss, persistence_loss })
}

/// Rollout from validation step `start`; also projects the 2 m temperature
/// forecast at every lead to `rasters/`.
pub fn rollout(cfg: &RunConfig, run_dir: &Path, checkpoint: &Path, start: usize, n_steps: usize) -> Result<RolloutReport> {
    let (train, val) = splits(cfg)?;
    let model = load_model_file::<f32>(cfg.model.clone(), checkpoint)?;
    let clim = ClimatologyTable::build(&train)?;
    let mut recorder = Recorder { model, states: Vec::new() };
    let report = evaluate(&mut recorder, &val, &clim, &[start], n_steps)?;
    std::fs::create_dir_all(run_dir.join("rasters"))?;
    report.write_csv(run_dir.join(format!("rollout_s{start:04}.csv")))?;
    let spec = val.spec();
    let t2m = SURFACE_VARIABLES.iter().position(|v| *v == "t2m").expect("t2m is a surface variable");
    let (n_lat, n_lon) = raster_size(spec);
    for (i, state) in recorder.states.iter().enumerate().filter(|(_, s)| s.all_finite()) {
        let mut physical = state.clone();
        val.stats().denormalize(&mut physical);
        let field: Vec<f64> = physical.surface.to_f64_vec();
        let grid = hpx_to_latlon(&field, spec, SURFACE_VARIABLES.len(), n_lat, n_lon)?;
        write_pgm(run_dir.join("rasters").join(format!("rollout_s{start:04}_lead{:02}_t2m.pgm", i + 1)), &grid, t2m)?;
    }
    Ok(report)
}

/// Keeps every forecast for rasterizing.
struct Recorder {
    model: Pear<f32>,
    states: Vec<VolumetricState<f32>>,
}

impl Forecaster for Recorder {
    fn forecast(&mut self, state: &VolumetricState<f32>) -> Result<VolumetricState<f32>> {
        let next = self.model.forecast(state)?;
        self.states.push(next.clone());
        Ok(next)
    }
}

/// Lat-lon raster roughly matching the pixel spacing, at least 2 degrees.
pub fn raster_size(spec: GridSpec) -> (usize, usize) {
    let deg = spec.pixel_area().sqrt().to_degrees().min(2.0);
    let n_lon = (360.0 / deg).round() as usize;
    (n_lon / 2 + 1, n_lon)
}

/// Lat-lon file `(n_lat, n_lon, C)` or `(T, n_lat, n_lon, C)` to a HEALPix
/// file `(N, C)` or `(T, N, C)`.
pub fn resample_file(input: &Path, n_side: u64, output: &Path) -> Result<()> {
    let src = SphereTensorFile::load(input)?;
    let GridKind::LatLon { n_lat, n_lon } = src.header.grid else {
        return Err(Error::Format("resample input must be on a lat-lon grid".into()));
    };
    let shape = &src.header.shape;
    let (steps, channels) = match shape[..] {
        [a, b, c] if (a, b) == (n_lat, n_lon) => (1, c),
        [t, a, b, c] if (a, b) == (n_lat, n_lon) => (t, c),
        _ => return Err(Error::Format(format!("lat-lon shape {shape:?} for a {n_lat}x{n_lon} grid"))),
    };
    let spec = GridSpec::from_nside(n_side)?;
    let per_step = n_lat * n_lon * channels;
    let mut data = Vec::with_capacity(steps * spec.n_pix() as usize * channels);
    for t in 0..steps {
        let values = src.data[t * per_step..(t + 1) * per_step].iter().map(|v| *v as f64).collect();
        let grid = LatLonGrid::new(n_lat, n_lon, channels, values)?;
        data.extend(latlon_to_hpx(&grid, spec)?.into_iter().map(|v| v as f32));
    }
    let mut header = src.header.clone();
    header.grid = GridKind::Healpix { n_side };
    header.shape = if shape.len() == 3 {
        vec![spec.n_pix() as usize, channels]
    } else {
        vec![steps, spec.n_pix() as usize, channels]
    };
    SphereTensorFile::new(header, data)?.save(output)
}

/// Projects one step and one channel of a HEALPix file onto a lat-lon
/// raster, written as PGM or as `lat,lon,value` CSV depending on the output
/// extension. Per-pixel trailing axes are flattened, so the channel of
/// upper-air variable `v` at level `l` is `l * 5 + v`.
pub fn project_file(input: &Path, output: &Path, step: usize, channel: usize, size: Option<(usize, usize)>) -> Result<()> {
    let src = SphereTensorFile::load(input)?;
    let GridKind::Healpix { n_side } = src.header.grid else {
        return Err(Error::Format("project input must be on a HEALPix grid".into()));
    };
    let spec = GridSpec::from_nside(n_side)?;
    let n = spec.n_pix() as usize;
    let shape = &src.header.shape;
    let axis = shape.iter().position(|&d| d == n).ok_or_else(|| Error::Format(format!("no pixel axis in {shape:?}")))?;
    let steps: usize = shape[..axis].iter().product();
    let channels: usize = shape[axis + 1..].iter().product();
    if step >= steps || channel >= channels {
        return Err(Error::Config(format!("step {step} / channel {channel} outside {steps} steps x {channels} channels")));
    }
    let block = &src.data[step * n * channels..(step + 1) * n * channels];
    let field: Vec<f64> = block.chunks(channels).map(|px| px[channel] as f64).collect();
    let (n_lat, n_lon) = size.unwrap_or_else(|| raster_size(spec));
    let grid = hpx_to_latlon(&field, spec, 1, n_lat, n_lon)?;
    match output.extension().and_then(|e| e.to_str()) {
        Some("csv") => write_csv(output, &grid, 0),
        _ => write_pgm(output, &grid, 0),
    }
}
