//! Run configuration.
//!
//! Configs are TOML: flat `key = value` pairs grouped in one section per
//! concern. Unknown keys are rejected. Any key can be overridden with a
//! `section.key=value` string whose value is parsed as a TOML value, falling
//! back to a bare string.
//!
//! ```toml
//! [run]
//! seed = 7
//! output = "runs/synthetic"
//!
//! [data]
//! source = "synthetic"
//!
//! [synthetic]
//! n_train = 100000
//! n_test = 20000
//!
//! [model]
//! head = "fm"
//! embed_dim = 8
//!
//! [grda]
//! c = 0.005
//! mu = 0.6
//! ```

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{hex_prefix, InteractionId};
use crate::error::{Error, Result};
use crate::ingest::{IngestConfig, SyntheticOptions};
use crate::network::{Head, ModelConfig};
use crate::optim::{AdamConfig, GrdaConfig};
use crate::par::Execution;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub seed: u64,
    pub output: PathBuf,
    pub execution: Execution,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            seed: 1,
            output: PathBuf::from("runs/default"),
            execution: Execution::Parallel,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    /// Generated from the `[synthetic]` section.
    Synthetic,
    /// Raw logs encoded with the `[ingest]` section.
    Raw,
    /// Already-encoded splits with a schema file.
    Encoded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub source: DataSource,
    /// Raw log file, for `raw`.
    pub raw: Option<PathBuf>,
    /// Encoded train split and optional test split, for `encoded`.
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub schema: Option<PathBuf>,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            raw: None,
            train: None,
            test: None,
            schema: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSection {
    pub n_train: usize,
    pub n_test: usize,
    /// Seed of the sampled task; defaults to the run seed.
    pub data_seed: Option<u64>,
    pub fields: usize,
    pub categories: usize,
    pub planted: Vec<InteractionId>,
    pub noise_scale: f64,
    pub calibration_samples: usize,
}

impl Default for SyntheticSection {
    fn default() -> Self {
        Self::with_options(100_000, 20_000, SyntheticOptions::default())
    }
}

impl SyntheticSection {
    pub fn with_options(n_train: usize, n_test: usize, o: SyntheticOptions) -> Self {
        Self {
            n_train,
            n_test,
            data_seed: None,
            fields: o.fields,
            categories: o.categories,
            planted: o.planted,
            noise_scale: o.noise_scale,
            calibration_samples: o.calibration_samples,
        }
    }

    pub fn options(&self) -> SyntheticOptions {
        SyntheticOptions {
            fields: self.fields,
            categories: self.categories,
            planted: self.planted.clone(),
            noise_scale: self.noise_scale,
            calibration_samples: self.calibration_samples,
        }
    }
}

/// Epoch budget and batching of one stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageSection {
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for StageSection {
    fn default() -> Self {
        Self {
            epochs: 1,
            batch_size: 2000,
        }
    }
}

/// Retrain variants: which α starts the stage, whether Adam trains it, and
/// whether interaction BN stays on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub bn: bool,
    pub alpha_trainable: bool,
    /// Start from the searched α; otherwise every open α starts at 1.
    pub alpha_from_search: bool,
}

impl Default for RetrainSection {
    fn default() -> Self {
        Self {
            epochs: 1,
            batch_size: 2000,
            bn: true,
            alpha_trainable: true,
            alpha_from_search: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub batch_size: usize,
    /// Evaluate on the test split after every epoch.
    pub per_epoch: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            batch_size: 10_000,
            per_epoch: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub run: RunSection,
    pub data: DataSection,
    pub synthetic: SyntheticSection,
    pub ingest: Option<IngestConfig>,
    pub model: ModelConfig,
    pub adam: AdamConfig,
    pub grda: GrdaConfig,
    pub search: StageSection,
    pub retrain: RetrainSection,
    pub eval: EvalSection,
}

fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts
        .pop()
        .filter(|k| !k.is_empty())
        .ok_or_else(|| Error::Config(format!("bad key `{key}`")))?;
    let mut cur = table;
    for p in parts {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{p}` in `{key}` is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key v"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

impl RunConfig {
    /// Parses a config, applies `section.key=value` overrides and validates.
    pub fn from_toml_with(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            set_path(&mut table, k.trim(), parse_value(v.trim()))?;
        }
        let config: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Self::from_toml_with(text, &[])
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// First 16 hex digits of the SHA-256 of the canonical serialization,
    /// leaving out the output directory and the execution mode, which do
    /// not affect results.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.run.output = PathBuf::new();
        canonical.run.execution = Execution::default();
        let text = canonical.to_toml().expect("configs serialize");
        hex_prefix(Sha256::digest(text.as_bytes()).as_slice(), 16)
    }

    pub fn data_seed(&self) -> u64 {
        self.synthetic.data_seed.unwrap_or(self.run.seed)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.adam.validate()?;
        self.grda.validate()?;
        for (name, batch) in [("search", self.search.batch_size), ("retrain", self.retrain.batch_size)] {
            if batch < 2 {
                return Err(Error::Config(format!("{name}.batch_size must be at least 2")));
            }
        }
        if self.eval.batch_size == 0 {
            return Err(Error::Config("eval.batch_size must be positive".into()));
        }
        if self.model.head == Head::Fm3 {
            return Err(Error::Config(
                "model.head = fm3 is built by the third-order pipeline; configure the pair model".into(),
            ));
        }
        if self.model.triple_mode.is_some() {
            return Err(Error::Config(
                "model.triple_mode is set by the third-order pipeline".into(),
            ));
        }
        match self.data.source {
            DataSource::Synthetic => {
                self.synthetic.options().validate()?;
                if self.synthetic.n_train < 2 {
                    return Err(Error::Config("synthetic.n_train must be at least 2".into()));
                }
            }
            DataSource::Raw => {
                if self.data.raw.is_none() {
                    return Err(Error::Config("data.raw is required for source = raw".into()));
                }
                self.ingest
                    .as_ref()
                    .ok_or_else(|| Error::Config("an [ingest] section is required for source = raw".into()))?
                    .validate()?;
            }
            DataSource::Encoded => {
                if self.data.train.is_none() || self.data.schema.is_none() {
                    return Err(Error::Config(
                        "data.train and data.schema are required for source = encoded".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}
