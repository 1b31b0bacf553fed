//! JSON checkpoints: model configuration plus every parameter value.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::{Model, ModelConfig};
use crate::params::NamedTensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    /// Completed epochs when the snapshot was taken.
    pub epoch: usize,
    pub model: ModelConfig,
    pub params: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn of(model: &Model, epoch: usize) -> Self {
        Checkpoint {
            epoch,
            model: model.config.clone(),
            params: model.params.snapshot(),
        }
    }

    /// Rebuilds the model and loads the stored values.
    pub fn restore(&self) -> Result<Model> {
        let mut model = Model::new(self.model.clone())?;
        model.params.load(&self.params)?;
        Ok(model)
    }

    /// Writes through a temporary sibling file and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_vec(self)?;
        write_atomic(path, &json)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }
}

/// Writes `bytes` to `path` so that readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}
