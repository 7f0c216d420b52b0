//! Run configuration: one TOML file, `section.key=value` overrides, and the
//! `PEAR_SEED` environment variable.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::SyntheticConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::TrainConfig;

pub const SEED_ENV: &str = "PEAR_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset directory (`surface.stf`, `upper.stf`); synthetic data is
    /// generated in memory when unset.
    pub dir: Option<PathBuf>,
    /// Leading steps used for training and normalization statistics; the
    /// remainder is the validation split.
    pub train_steps: usize,
    pub synthetic: SyntheticConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { dir: None, train_steps: 64, synthetic: SyntheticConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub lead_days: usize,
    /// Distance between initial states in the validation split.
    pub start_stride: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { lead_days: 10, start_stride: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { data: DataConfig::default(), model: ModelConfig::desk(), train: TrainConfig::default(), eval: EvalConfig::default() }
    }
}

/// Sets `path = value` (dotted path) in a TOML tree. The value is parsed as
/// TOML, falling back to a plain string.
fn set_path(root: &mut toml::Value, path: &str, raw: &str) -> Result<()> {
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let mut node = root;
    let mut keys = path.split('.').peekable();
    while let Some(key) = keys.next() {
        let table = node.as_table_mut().ok_or_else(|| Error::Config(format!("{path}: {key} is not a table")))?;
        if keys.peek().is_none() {
            table.insert(key.to_string(), value);
            return Ok(());
        }
        node = table.entry(key.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    Err(Error::Config(format!("empty override path {path:?}")))
}

/// Recursively overlays `top` onto `base`.
fn merge(base: &mut toml::Value, top: toml::Value) {
    match (base, top) {
        (toml::Value::Table(b), toml::Value::Table(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl RunConfig {
    /// Keys missing from `tree` take the values of [`RunConfig::default`],
    /// section by section.
    fn from_tree(tree: toml::Value) -> Result<Self> {
        let explicit_n_side = tree.get("data").and_then(|d| d.get("synthetic")).and_then(|s| s.get("n_side")).is_some();
        let mut full = toml::Value::try_from(Self::default()).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut full, tree);
        let mut cfg: Self = full.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        if !explicit_n_side {
            cfg.data.synthetic.n_side = cfg.model.n_side;
        }
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Self::from_tree(toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// File (or defaults), then `key=value` overrides, then `PEAR_SEED`.
    /// Synthetic data takes the model's n_side unless set explicitly.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)?,
            None => String::new(),
        };
        let mut tree: toml::Value = toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            let (key, value) = o.split_once('=').ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            set_path(&mut tree, key.trim(), value.trim())?;
        }
        let mut cfg = Self::from_tree(tree)?;
        if let Ok(seed) = std::env::var(SEED_ENV) {
            cfg.train.seed = seed.trim().parse().map_err(|_| Error::Config(format!("{SEED_ENV}={seed:?} is not an integer")))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.data.dir.is_none() && self.data.synthetic.n_side != self.model.n_side {
            return Err(Error::Config(format!(
                "synthetic n_side {} differs from model n_side {}",
                self.data.synthetic.n_side, self.model.n_side
            )));
        }
        if self.eval.start_stride == 0 {
            return Err(Error::Config("eval.start_stride must be at least 1".into()));
        }
        Ok(())
    }

    /// Writes `config.toml` into `run_dir`.
    pub fn snapshot(&self, run_dir: &Path) -> Result<()> {
        std::fs::create_dir_all(run_dir)?;
        std::fs::write(run_dir.join("config.toml"), self.to_toml()?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_roundtrip_and_overrides() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap(), cfg);
        let mut tree: toml::Value = toml::from_str("[train]\nlr = 1e-3\n").unwrap();
        set_path(&mut tree, "train.steps", "7").unwrap();
        set_path(&mut tree, "data.dir", "some/where").unwrap();
        set_path(&mut tree, "train.precision", "\"f64\"").unwrap();
        set_path(&mut tree, "model.depths", "[2, 4, 2]").unwrap();
        let cfg = RunConfig::from_tree(tree).unwrap();
        assert_eq!((cfg.train.lr, cfg.train.steps), (1e-3, 7));
        // A partial section keeps the desk defaults for everything else.
        assert_eq!(cfg.model, ModelConfig { depths: [2, 4, 2], ..ModelConfig::desk() });
        assert_eq!(cfg.data.synthetic.n_side, 8);
        assert_eq!(cfg.data.dir.as_deref(), Some(Path::new("some/where")));
        assert_eq!(cfg.train.precision, crate::train::Precision::F64);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml("[train]\nlearning_rate = 1.0\n").is_err());
    }
}
