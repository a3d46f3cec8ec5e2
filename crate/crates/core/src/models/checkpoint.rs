//! JSON model checkpoints.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelError, ModelSpec, ResponsibilityModel};
use crate::setup::FilterSetupConfig;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub model: ModelSpec,
    pub params: Vec<f64>,
    pub seed: u64,
    #[serde(default)]
    pub input_scale: Option<Vec<f64>>,
    /// Filter the model was trained against, when known.
    #[serde(default)]
    pub filter: Option<FilterSetupConfig>,
}

impl Checkpoint {
    pub fn from_model(model: &ResponsibilityModel, filter: Option<FilterSetupConfig>) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            model: model.spec().clone(),
            params: model.params().to_vec(),
            seed: model.seed(),
            input_scale: model.input_scale().map(<[f64]>::to_vec),
            filter,
        }
    }

    pub fn to_model(&self) -> Result<ResponsibilityModel, ModelError> {
        if self.version != CHECKPOINT_VERSION {
            return Err(ModelError::Checkpoint(format!(
                "unsupported version {} (expected {CHECKPOINT_VERSION})",
                self.version
            )));
        }
        ResponsibilityModel::from_parts(
            self.model.clone(),
            self.params.clone(),
            self.seed,
            self.input_scale.clone(),
        )
    }
}

pub fn save_checkpoint(checkpoint: &Checkpoint, path: &Path) -> Result<(), ModelError> {
    let text = serde_json::to_string_pretty(checkpoint)
        .map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    std::fs::write(path, text)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, ModelError> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text)
        .map_err(|e| ModelError::Checkpoint(format!("{}: {e}", path.display())))
}
