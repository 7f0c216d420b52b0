//! Single-stream training: weighted L1 loss, AdamW, seeded per-epoch
//! shuffling, checkpoints that carry optimizer state, and a CSV loss log.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::optim::{AdamW, AdamWConfig};
use crate::autodiff::{checkpoint, Element, Tape, Tensor, Var};
use crate::data::{weighted_l1, Dataset};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Pear, VolumetricState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub surface_loss_weight: f64,
    /// Samples whose gradients are averaged into one optimizer step.
    pub batch_size: usize,
    /// Optimizer steps in total (a resumed run continues up to this count).
    pub steps: u64,
    pub seed: u64,
    pub precision: Precision,
    /// Checkpoint every this many steps; 0 keeps only the final one.
    pub checkpoint_every: u64,
    /// Cosine decay of the learning rate to zero over `steps`.
    pub cosine_decay: bool,
    /// Global gradient-norm clip.
    pub grad_clip: Option<f64>,
    /// Train on the first this many pairs only.
    pub max_pairs: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamWConfig::default();
        Self {
            lr: adam.lr,
            weight_decay: adam.weight_decay,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            surface_loss_weight: 0.25,
            batch_size: 1,
            steps: 2000,
            seed: 0,
            precision: Precision::F32,
            checkpoint_every: 500,
            cosine_decay: false,
            grad_clip: None,
            max_pairs: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.weight_decay >= 0.0 && self.surface_loss_weight >= 0.0) {
            return Err(Error::Config("weight_decay and surface_loss_weight must be non-negative".into()));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.eps > 0.0) {
            return Err(Error::Config("betas must lie in [0, 1) and eps be positive".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config(format!("grad_clip must be positive, got {c}")));
            }
        }
        if self.max_pairs == Some(0) {
            return Err(Error::Config("max_pairs must be at least 1".into()));
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig { lr: self.lr, weight_decay: self.weight_decay, beta1: self.beta1, beta2: self.beta2, eps: self.eps }
    }

    /// Learning rate for the update that produces step `step` (1-based).
    pub fn lr_at(&self, step: u64) -> f64 {
        if !self.cosine_decay || self.steps == 0 {
            return self.lr;
        }
        let t = (step.saturating_sub(1)).min(self.steps) as f64 / self.steps as f64;
        0.5 * self.lr * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

/// `w · mean|Δ surface| + mean|Δ upper|` on the tape.
pub fn loss<T: Element>(
    tape: &Tape<T>,
    surface: &Var<T>,
    upper: &Var<T>,
    target: &VolumetricState<T>,
    surface_weight: f64,
) -> Result<Var<T>> {
    let ls = tape.l1(surface, &tape.constant(target.surface.clone()))?;
    let lu = tape.l1(upper, &tape.constant(target.upper.clone()))?;
    tape.add(&tape.scale(&ls, surface_weight), &lu)
}

/// Mean weighted L1 of one-step forecasts over pairs `(t, t+1)` for `t` in
/// `0..pairs`, in normalized units.
pub fn mean_loss<T: Element>(model: &Pear<T>, data: &Dataset, pairs: usize, surface_weight: f64) -> Result<f64> {
    if pairs == 0 || pairs > data.pairs() {
        return Err(Error::Config(format!("{pairs} pairs requested from {} available", data.pairs())));
    }
    let mut total = 0.0;
    for t in 0..pairs {
        let pred: VolumetricState<f32> = model.forward(&data.normalized(t).cast())?.cast();
        total += weighted_l1(&pred, &data.normalized(t + 1), surface_weight)?;
    }
    Ok(total / pairs as f64)
}

const STEP_KEY: &str = "opt/step";
const SEEN_KEY: &str = "train/samples_seen";

/// Integer counters are stored as f32 scalars, exact below 2^24.
fn counter(value: u64, name: &str) -> Result<Tensor<f32>> {
    if value >= 1 << 24 {
        return Err(Error::Contract(format!("{name} = {value} exceeds the checkpoint counter range")));
    }
    Ok(Tensor::scalar(value as f32))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub steps: u64,
    /// Mean training loss of the last logged step.
    pub last_loss: f64,
    pub val_loss: Option<f64>,
    pub final_checkpoint: Option<PathBuf>,
}

/// Model plus optimizer state plus the position in the sample stream.
pub struct Trainer<T: Element> {
    model: Pear<T>,
    opt: AdamW<T>,
    config: TrainConfig,
    samples_seen: u64,
}

impl<T: Element> Trainer<T> {
    pub fn new(model: Pear<T>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let opt = AdamW::new(config.adamw(), model.params());
        Ok(Self { model, opt, config, samples_seen: 0 })
    }

    /// Fresh model initialized from the training seed.
    pub fn init(model_config: ModelConfig, config: TrainConfig) -> Result<Self> {
        let model = Pear::new(model_config, &mut ChaCha8Rng::seed_from_u64(config.seed))?;
        Self::new(model, config)
    }

    pub fn model(&self) -> &Pear<T> {
        &self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn step_count(&self) -> u64 {
        self.opt.step_count()
    }

    pub fn samples_seen(&self) -> u64 {
        self.samples_seen
    }

    fn pairs(&self, data: &Dataset) -> Result<usize> {
        let n = self.config.max_pairs.map_or(data.pairs(), |m| m.min(data.pairs()));
        if n == 0 {
            return Err(Error::Config("training needs at least one (t, t+1) pair".into()));
        }
        Ok(n)
    }

    /// Pair index of the `k`-th sample: epochs are seeded permutations.
    pub fn sample_index(seed: u64, k: u64, n: usize) -> usize {
        let epoch = k / n as u64;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch + 1);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        order[(k % n as u64) as usize]
    }

    /// Loss and parameter gradients of one sample.
    fn sample_grads(&self, data: &Dataset, t: usize) -> Result<(f64, Vec<Tensor<T>>)> {
        let input: VolumetricState<T> = data.normalized(t).cast();
        let target: VolumetricState<T> = data.normalized(t + 1).cast();
        let tape = Tape::new();
        let (l, vars) = {
            let net = self.model.bind(&tape);
            let (s, u) = net.forward(&tape.constant(input.surface), &tape.constant(input.upper))?;
            (loss(&tape, &s, &u, &target, self.config.surface_loss_weight)?, net.vars().to_vec())
        };
        let value = l.value().item().to_f64();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("training loss at step {}", self.step_count() + 1)));
        }
        let grads = tape.backward(&l)?;
        Ok((value, vars.iter().map(|v| grads.get_or_zeros(v)).collect()))
    }

    /// One optimizer step over `batch_size` samples; returns their mean loss.
    /// On a non-finite loss or gradient the parameters are left unchanged.
    pub fn train_step(&mut self, data: &Dataset) -> Result<f64> {
        let n = self.pairs(data)?;
        let b = self.config.batch_size;
        let mut total = 0.0;
        let mut acc: Option<Vec<Tensor<T>>> = None;
        for i in 0..b {
            let t = Self::sample_index(self.config.seed, self.samples_seen + i as u64, n);
            let (value, grads) = self.sample_grads(data, t)?;
            total += value;
            match &mut acc {
                None => acc = Some(grads),
                Some(sum) => {
                    for (s, g) in sum.iter_mut().zip(&grads) {
                        s.data_mut().iter_mut().zip(g.data()).for_each(|(a, v)| *a += *v);
                    }
                }
            }
        }
        let mut grads = acc.expect("batch_size >= 1");
        let mut factor = 1.0 / b as f64;
        if let Some(clip) = self.config.grad_clip {
            let sq: f64 = grads.iter().flat_map(|g| g.data()).map(|v| v.to_f64().powi(2)).sum();
            let norm = sq.sqrt() * factor;
            if norm > clip {
                factor *= clip / norm;
            }
        }
        if factor != 1.0 {
            let f = T::from_f64(factor);
            grads.iter_mut().for_each(|g| g.data_mut().iter_mut().for_each(|v| *v *= f));
        }
        let lr = self.config.lr_at(self.step_count() + 1);
        self.opt.step_with_lr(self.model.params_mut(), &grads, lr)?;
        self.samples_seen += b as u64;
        Ok(total / b as f64)
    }

    /// Parameters, AdamW moments and counters as named f32 records.
    pub fn checkpoint_records(&self) -> Result<Vec<(String, Tensor<f32>)>> {
        let params = self.model.params();
        let mut out: Vec<(String, Tensor<f32>)> = params.iter().map(|(n, t)| (n.to_string(), t.cast())).collect();
        for (i, name) in params.names().iter().enumerate() {
            out.push((format!("opt/m/{name}"), self.opt.first_moments()[i].cast()));
            out.push((format!("opt/v/{name}"), self.opt.second_moments()[i].cast()));
        }
        out.push((STEP_KEY.into(), counter(self.step_count(), STEP_KEY)?));
        out.push((SEEN_KEY.into(), counter(self.samples_seen, SEEN_KEY)?));
        Ok(out)
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        checkpoint::save(path, &self.checkpoint_records()?)
    }

    /// Rebuilds a trainer from a checkpoint written by [`save_checkpoint`](Self::save_checkpoint).
    pub fn resume(model_config: ModelConfig, config: TrainConfig, path: impl AsRef<Path>) -> Result<Self> {
        config.validate()?;
        let records = checkpoint::load(path)?;
        let model = load_model::<T>(model_config, &records)?;
        let find = |name: &str| {
            records
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks {name}")))
        };
        let mut m = Vec::with_capacity(model.params().len());
        let mut v = Vec::with_capacity(model.params().len());
        for name in model.params().names() {
            m.push(find(&format!("opt/m/{name}"))?.cast());
            v.push(find(&format!("opt/v/{name}"))?.cast());
        }
        let step = find(STEP_KEY)?.item() as u64;
        let samples_seen = find(SEEN_KEY)?.item() as u64;
        let opt = AdamW::from_state(config.adamw(), step, m, v);
        Ok(Self { model, opt, config, samples_seen })
    }

    /// Runs until `config.steps` optimizer steps have been taken. With a run
    /// directory, appends to `loss.csv` and writes `checkpoints/`; on a
    /// non-finite loss the unchanged parameters go to
    /// `checkpoints/last_good.ckpt` before the error is returned.
    pub fn fit(&mut self, train: &Dataset, val: Option<&Dataset>, run_dir: Option<&Path>) -> Result<TrainSummary> {
        let w = self.config.surface_loss_weight;
        let mut log = match run_dir {
            Some(dir) => Some(LossLog::open(dir)?),
            None => None,
        };
        let ckpt_dir = run_dir.map(|d| d.join("checkpoints"));
        if let Some(d) = &ckpt_dir {
            fs::create_dir_all(d)?;
        }
        let val_loss = |model: &Pear<T>| -> Result<Option<f64>> {
            match val {
                Some(v) if v.pairs() > 0 => Ok(Some(mean_loss(&model.cast::<f32>(), v, v.pairs(), w)?)),
                _ => Ok(None),
            }
        };
        let mut last_loss = f64::NAN;
        while self.step_count() < self.config.steps {
            let loss = match self.train_step(train) {
                Ok(l) => l,
                Err(e @ Error::NonFinite(_)) => {
                    if let Some(d) = &ckpt_dir {
                        self.save_checkpoint(d.join("last_good.ckpt"))?;
                        log::error!("{e}; parameters of step {} saved to last_good.ckpt", self.step_count());
                    }
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            last_loss = loss;
            let step = self.step_count();
            let periodic = self.config.checkpoint_every > 0 && step % self.config.checkpoint_every == 0;
            let mut val_value = None;
            if periodic && step < self.config.steps {
                val_value = val_loss(&self.model)?;
                if let Some(d) = &ckpt_dir {
                    self.save_checkpoint(d.join(format!("step_{step:07}.ckpt")))?;
                }
                log::info!("step {step}: loss {loss:.6}, val {val_value:?}");
            }
            if let Some(l) = &mut log {
                l.append(step, loss, val_value)?;
            }
        }
        let val_value = val_loss(&self.model)?;
        let mut final_checkpoint = None;
        if let Some(d) = &ckpt_dir {
            let path = d.join("final.ckpt");
            self.save_checkpoint(&path)?;
            final_checkpoint = Some(path);
        }
        if let (Some(l), Some(v)) = (&mut log, val_value) {
            l.append_val(self.step_count(), v)?;
        }
        Ok(TrainSummary { steps: self.step_count(), last_loss, val_loss: val_value, final_checkpoint })
    }
}

/// Model parameters from checkpoint records (optimizer entries ignored).
pub fn load_model<T: Element>(config: ModelConfig, records: &[(String, Tensor<f32>)]) -> Result<Pear<T>> {
    let mut model = Pear::<T>::new(config, &mut ChaCha8Rng::seed_from_u64(0))?;
    model.params_mut().load_named(records.iter().map(|(n, t)| (n.as_str(), t.cast::<T>())))?;
    Ok(model)
}

pub fn load_model_file<T: Element>(config: ModelConfig, path: impl AsRef<Path>) -> Result<Pear<T>> {
    load_model(config, &checkpoint::load(path)?)
}

/// `loss.csv`: `step,train_loss,val_loss`; validation only on checkpoint steps.
struct LossLog {
    file: fs::File,
}

impl LossLog {
    fn open(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let path = dir.join("loss.csv");
        let fresh = !path.exists();
        let mut file = OpenOptions::new().create(true).append(true).open(path)?;
        if fresh {
            writeln!(file, "step,train_loss,val_loss")?;
        }
        Ok(Self { file })
    }

    fn append(&mut self, step: u64, loss: f64, val: Option<f64>) -> Result<()> {
        let v = val.map(|v| v.to_string()).unwrap_or_default();
        writeln!(self.file, "{step},{loss},{v}")?;
        Ok(())
    }

    fn append_val(&mut self, step: u64, val: f64) -> Result<()> {
        writeln!(self.file, "{step},,{val}")?;
        Ok(())
    }
}
