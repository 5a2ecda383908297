//! Run configuration: one TOML document plus `section.key=value` overrides.
//!
//! ```toml
//! seed = 0
//! out_dir = "runs/default"
//!
//! [dataset]
//! name = "lol-v1"
//! root = "data/LOL"
//!
//! [model]
//! use_seblock = true
//!
//! [schedule]
//! total_epochs = 750
//!
//! [loss]
//! mode = "all"
//!
//! [train]
//! batch_size = 8
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetName, LoadOptions, TRAIN_SIZE};
use crate::error::{config_err, Error, Result};
use crate::losses::{FeatureExtractor, LossMode, LossWeights, Objective};
use crate::model::ModelConfig;
use crate::schedule::ScheduleConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub name: DatasetName,
    pub root: PathBuf,
    pub train_size: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig { name: DatasetName::Custom, root: PathBuf::from("data"), train_size: TRAIN_SIZE }
    }
}

impl DatasetConfig {
    pub fn load_options(&self) -> LoadOptions {
        LoadOptions { train_size: self.train_size }
    }
}

/// Unset weights take [`LossWeights::default_for`] the mode. Without an
/// `extractor` archive the perceptual term uses the seeded surrogate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub mode: LossMode,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub w_vgg: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub w_charbonnier: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub w_combined: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub extractor: Option<PathBuf>,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { mode: LossMode::All, w_vgg: None, w_charbonnier: None, w_combined: None, extractor: None }
    }
}

impl LossConfig {
    pub fn weights(&self) -> LossWeights {
        let d = LossWeights::default_for(self.mode);
        LossWeights {
            w_vgg: self.w_vgg.unwrap_or(d.w_vgg),
            w_charbonnier: self.w_charbonnier.unwrap_or(d.w_charbonnier),
            w_combined: self.w_combined.unwrap_or(d.w_combined),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// The only source of randomness: initialisation, batch order, flips
    /// and the surrogate feature extractor.
    pub seed: u64,
    pub out_dir: PathBuf,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub schedule: ScheduleConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            dataset: DatasetConfig::default(),
            model: ModelConfig::default(),
            schedule: ScheduleConfig::default(),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

const OPTIONAL_KEYS: [&str; 5] = ["loss.w_vgg", "loss.w_charbonnier", "loss.w_combined", "loss.extractor", "train.max_steps"];

/// Every accepted key, dotted, sorted.
pub fn valid_keys() -> Vec<String> {
    let table = toml::Table::try_from(RunConfig::default()).expect("default configuration serialises");
    let mut keys: Vec<String> = OPTIONAL_KEYS.iter().map(|k| k.to_string()).collect();
    for (k, v) in table {
        match v {
            toml::Value::Table(t) => keys.extend(t.keys().map(|sub| format!("{k}.{sub}"))),
            _ => keys.push(k),
        }
    }
    keys.sort();
    keys
}

fn unknown_key(key: &str) -> Error {
    config_err!("unknown configuration key `{key}`; valid keys are:\n  {}", valid_keys().join("\n  "))
}

fn check_keys(table: &toml::Table) -> Result<()> {
    let valid = valid_keys();
    for (k, v) in table {
        match v {
            toml::Value::Table(t) if valid.iter().any(|x| x.starts_with(&format!("{k}."))) => {
                for sub in t.keys() {
                    let key = format!("{k}.{sub}");
                    if !valid.contains(&key) {
                        return Err(unknown_key(&key));
                    }
                }
            }
            _ if valid.contains(k) => {}
            _ => return Err(unknown_key(k)),
        }
    }
    Ok(())
}

/// Parses the right-hand side of an override as a TOML value, falling back
/// to a bare string (so `dataset.root=/data/lol` needs no quotes).
fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Applies `key=value` overrides to a parsed document.
pub fn apply_overrides(table: &mut toml::Table, overrides: &[String]) -> Result<()> {
    for o in overrides {
        let (key, raw) = o
            .split_once('=')
            .ok_or_else(|| config_err!("override `{o}` is not of the form key=value"))?;
        let key = key.trim();
        if !valid_keys().iter().any(|k| k == key) {
            return Err(unknown_key(key));
        }
        let value = parse_value(raw.trim());
        match key.split_once('.') {
            Some((section, field)) => {
                let entry = table.entry(section).or_insert_with(|| toml::Value::Table(toml::Table::new()));
                entry
                    .as_table_mut()
                    .ok_or_else(|| config_err!("`{section}` must be a table"))?
                    .insert(field.to_string(), value);
            }
            None => {
                table.insert(key.to_string(), value);
            }
        }
    }
    Ok(())
}

impl RunConfig {
    pub fn from_table(table: toml::Table) -> Result<Self> {
        check_keys(&table)?;
        let cfg: RunConfig = table.try_into().map_err(|e: toml::de::Error| config_err!("{}", e.message()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_table(text.parse().map_err(|e: toml::de::Error| config_err!("{e}"))?)
    }

    /// Reads `path` (or starts from the defaults) and applies overrides.
    pub fn resolve(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                text.parse().map_err(|e: toml::de::Error| config_err!("{}: {e}", p.display()))?
            }
            None => toml::Table::new(),
        };
        apply_overrides(&mut table, overrides)?;
        Self::from_table(table)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.schedule.validate()?;
        self.train.validate()?;
        self.loss.weights().validate()?;
        let ts = self.dataset.train_size;
        if ts < 8 || ts % 4 != 0 {
            return Err(config_err!("dataset.train_size must be a multiple of 4 and at least 8, got {ts}"));
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { seed: self.seed, ..self.train }
    }

    pub fn objective(&self) -> Result<Objective<f32>> {
        let fx = match &self.loss.extractor {
            Some(p) => FeatureExtractor::load(p)?,
            None => FeatureExtractor::surrogate(self.seed),
        };
        Objective::new(self.loss.mode, self.loss.weights(), fx)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serialises")
    }
}
