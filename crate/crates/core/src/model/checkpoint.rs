use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Layout, Model, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT: &str = "aesm2-checkpoint/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    /// Row-major values.
    pub values: Vec<f64>,
}

/// On-disk model: config echo, input layout and every parameter tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub config: ModelConfig,
    pub layout: Layout,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn from_model(model: &Model) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            config: model.config().clone(),
            layout: model.layout().clone(),
            tensors: model
                .params()
                .iter()
                .map(|p| NamedTensor {
                    name: p.name.clone(),
                    shape: p.tensor.shape().to_vec(),
                    values: p.tensor.data().to_vec(),
                })
                .collect(),
        }
    }

    pub fn into_model(self) -> Result<Model> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!(
                "unsupported format tag {:?}, expected {CHECKPOINT_FORMAT:?}",
                self.format
            )));
        }
        let tensors = self
            .tensors
            .into_iter()
            .map(|t| {
                let name = t.name;
                Tensor::new(t.shape, t.values)
                    .map(|tensor| (name.clone(), tensor))
                    .map_err(|e| Error::Checkpoint(format!("{name}: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Model::from_tensors(self.config, self.layout, tensors)
    }

    /// Loads against an expected config and layout, listing every tensor that
    /// does not fit.
    pub fn into_model_checked(self, config: &ModelConfig, layout: &Layout) -> Result<Model> {
        let mut checkpoint = self;
        if &checkpoint.layout != layout {
            return Err(Error::Checkpoint(format!(
                "checkpoint layout {:?} differs from data layout {layout:?}",
                checkpoint.layout
            )));
        }
        checkpoint.config = config.clone();
        checkpoint.into_model()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Checkpoint(format!("malformed checkpoint: {e}")))
    }

    /// Writes through a temporary file and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
        Checkpoint::from_json(&text)
    }
}

impl Model {
    pub fn save(&self, path: &Path) -> Result<()> {
        Checkpoint::from_model(self).save(path)
    }

    pub fn load(path: &Path) -> Result<Model> {
        Checkpoint::load(path)?.into_model()
    }
}

/// Replaces `path` with `bytes` via a sibling temporary file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Io(std::io::Error::other(format!("{} is not a file path", path.display()))))?;
    let tmp = path.with_file_name(format!(".{}.tmp", file_name.to_string_lossy()));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}
