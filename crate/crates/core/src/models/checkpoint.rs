//! On-disk checkpoints: a model-config header next to the parameter
//! manifest and blob.

use std::fs;
use std::path::Path;

use super::{Model, ModelConfig};
use crate::diffcore::ParameterSet;
use crate::error::{Error, Result};

pub const CHECKPOINT_CONFIG: &str = "model.json";
pub const CHECKPOINT_MANIFEST: &str = "params.json";
pub const CHECKPOINT_BLOB: &str = "params.bin";

/// Writes the checkpoint files into `dir`, creating it if needed.
pub fn save_checkpoint(model: &Model, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(CHECKPOINT_CONFIG), serde_json::to_string_pretty(&model.config)?)?;
    model.params.save(&dir.join(CHECKPOINT_MANIFEST), &dir.join(CHECKPOINT_BLOB))
}

/// Rebuilds the model named by the header and installs the stored values.
pub fn load_checkpoint(dir: &Path) -> Result<Model> {
    let text = fs::read_to_string(dir.join(CHECKPOINT_CONFIG))?;
    let config: ModelConfig = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", CHECKPOINT_CONFIG)))?;
    let stored = ParameterSet::load(&dir.join(CHECKPOINT_MANIFEST), &dir.join(CHECKPOINT_BLOB))?;
    let mut model = Model::new(config, 0)?;
    model.params.copy_values_from(&stored)?;
    Ok(model)
}
