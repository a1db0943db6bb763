//! TOML experiment specifications.
//!
//! ```toml
//! seed = 0                       # root of every cell's random stream
//! seeds = [0, 1, 2, 3, 4]        # seed indices run for every method
//! methods = ["ce_baseline", "pos_match"]
//! eval_split = "test"
//! out_dir = "runs/demo"          # optional; --out on the command line wins
//!
//! [data]                         # exactly one of `csv` or `synthetic`
//! csv = "data/"                  # dataset directory or CSV file
//!
//! [data.synthetic]               # generator settings (see GenConfig)
//! n_samples = 2000
//!
//! [model]                        # ModelConfig; input and head widths are
//! extractor_hidden = [64, 64]    # derived from the data and method
//!
//! [train]                        # TrainConfig shared by every method
//! epochs = 30
//!
//! [overrides.spectral_decoupling]  # per-method TrainConfig changes
//! sd_lambda = 1e-4
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use posmatch_core::data::{GenConfig, Split};
use posmatch_core::losses::MethodKind;
use posmatch_core::model::ModelConfig;
use posmatch_core::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reads and parses a TOML file.
pub fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|source| Error::Toml { path: path.to_path_buf(), source })
}

/// Where an experiment's data comes from.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSpec {
    pub csv: Option<PathBuf>,
    pub synthetic: Option<GenConfig>,
}

impl DataSpec {
    pub fn validate(&self) -> Result<()> {
        match (&self.csv, &self.synthetic) {
            (Some(_), Some(_)) => Err(Error::Config("[data] sets both `csv` and `synthetic`".into())),
            (Some(path), None) if !path.exists() => {
                Err(Error::Config(format!("data path {} does not exist", path.display())))
            }
            (None, Some(gen)) => Ok(gen.validate()?),
            _ => Ok(()),
        }
    }
}

fn default_seeds() -> Vec<u64> {
    (0..5).collect()
}

fn default_methods() -> Vec<MethodKind> {
    MethodKind::ALL.to_vec()
}

fn default_eval_split() -> Split {
    Split::Test
}

/// A methods × seeds experiment matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_methods")]
    pub methods: Vec<MethodKind>,
    #[serde(default = "default_eval_split")]
    pub eval_split: Split,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub data: DataSpec,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    /// Per-method TrainConfig keys applied on top of `train`.
    #[serde(default)]
    pub overrides: BTreeMap<MethodKind, toml::Table>,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            seeds: default_seeds(),
            methods: default_methods(),
            eval_split: default_eval_split(),
            out_dir: None,
            data: DataSpec::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            overrides: BTreeMap::new(),
        }
    }
}

impl ExperimentSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let spec: Self = read_toml(path)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(Error::Config("experiment needs at least one method".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("experiment needs at least one seed".into()));
        }
        let mut methods = self.methods.clone();
        methods.sort();
        methods.dedup();
        if methods.len() != self.methods.len() {
            return Err(Error::Config("methods listed more than once".into()));
        }
        let mut seeds = self.seeds.clone();
        seeds.sort();
        seeds.dedup();
        if seeds.len() != self.seeds.len() {
            return Err(Error::Config("seeds listed more than once".into()));
        }
        self.data.validate()?;
        for &m in &self.methods {
            self.train_config(m)?.validate()?;
        }
        Ok(())
    }

    /// The training configuration for `method`: shared settings, then the
    /// method's overrides, then the method itself.
    pub fn train_config(&self, method: MethodKind) -> Result<TrainConfig> {
        let mut cfg = match self.overrides.get(&method) {
            Some(table) => apply_overrides(&self.train, table)?,
            None => self.train.clone(),
        };
        cfg.method = method;
        Ok(cfg)
    }
}

/// Applies TOML keys on top of a serializable configuration.
pub fn apply_overrides<T>(base: &T, table: &toml::Table) -> Result<T>
where
    T: Serialize + serde::de::DeserializeOwned,
{
    let mut merged = toml::Table::try_from(base).map_err(|e| Error::Config(e.to_string()))?;
    for (k, v) in table {
        merged.insert(k.clone(), v.clone());
    }
    merged.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))
}
