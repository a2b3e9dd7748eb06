//! Versioned checkpoint files for trained models.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::train::TrainedModel;

pub const CHECKPOINT_MAGIC: &str = "METASENSE-CKPT-v1";

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    magic: String,
    model: TrainedModel,
}

impl TrainedModel {
    /// Write the model as a versioned JSON checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let file = CheckpointFile {
            magic: CHECKPOINT_MAGIC.to_string(),
            model: self.clone(),
        };
        let bytes = serde_json::to_vec(&file)?;
        fs::write(path, bytes)?;
        Ok(())
    }

    /// Load and validate a checkpoint written by [`TrainedModel::save`].
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        let file: CheckpointFile = serde_json::from_slice(&bytes)
            .map_err(|e| Error::Checkpoint(format!("unreadable checkpoint: {e}")))?;
        if file.magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint(format!(
                "magic '{}' does not match '{CHECKPOINT_MAGIC}'",
                file.magic
            )));
        }
        file.model.validate()?;
        Ok(file.model)
    }
}
