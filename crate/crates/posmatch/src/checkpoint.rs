//! JSON checkpoints: model configuration, training configuration, and every
//! parameter tensor by name. Values are serialized with shortest round-trip
//! formatting, so a save → load cycle reproduces the parameters bit for bit.

use std::fs;
use std::path::Path;

use posmatch_core::model::{ModelConfig, ModelParams};
use posmatch_core::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FORMAT: &str = "posmatch-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub name: String,
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Epoch whose parameters are stored (the best validation epoch).
    pub epoch: Option<usize>,
    pub tensors: Vec<Tensor>,
}

impl Checkpoint {
    pub fn new(params: &ModelParams, train: &TrainConfig, epoch: Option<usize>) -> Self {
        let tensors = params
            .named_tensors()
            .into_iter()
            .map(|(name, (r, c), data)| Tensor { name, shape: [r, c], data: data.to_vec() })
            .collect();
        Self {
            format: FORMAT.into(),
            version: VERSION,
            model: params.config.clone(),
            train: train.clone(),
            epoch,
            tensors,
        }
    }

    /// Rebuilds the parameters, checking tensor names and shapes against the
    /// stored model configuration.
    pub fn params(&self) -> Result<ModelParams> {
        let mut params =
            ModelParams::from_tensors(&self.model, &self.tensors.iter().map(|t| t.data.clone()).collect::<Vec<_>>())?;
        let expected: Vec<(String, [usize; 2])> =
            params.named_tensors().into_iter().map(|(n, (r, c), _)| (n, [r, c])).collect();
        for (t, (name, shape)) in self.tensors.iter().zip(&expected) {
            if &t.name != name || &t.shape != shape {
                return Err(Error::Config(format!(
                    "checkpoint tensor {} {:?} does not match expected {} {:?}",
                    t.name, t.shape, name, shape
                )));
            }
        }
        params.config = self.model.clone();
        Ok(params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| Error::json(path, e))?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        if ck.format != FORMAT || ck.version != VERSION {
            return Err(Error::Config(format!(
                "{}: unsupported checkpoint format {} v{}",
                path.display(),
                ck.format,
                ck.version
            )));
        }
        Ok(ck)
    }
}
