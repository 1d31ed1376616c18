use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::MoEModel;

pub const CHECKPOINT_FORMAT: &str = "heapr-moe-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Checkpoint<M> {
    format: String,
    version: u32,
    model: M,
}

impl MoEModel {
    /// JSON checkpoint. Floats are written with shortest round-trip
    /// formatting, so save/load is bit-exact.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            model: self,
        })?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let ck: Checkpoint<MoEModel> = serde_json::from_str(s)?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Parse(format!("unknown checkpoint format {:?}", ck.format)));
        }
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Parse(format!(
                "checkpoint version {} (expected {CHECKPOINT_VERSION})",
                ck.version
            )));
        }
        ck.model.validate()?;
        Ok(ck.model)
    }
}

pub fn save_checkpoint(model: &MoEModel, path: &Path) -> Result<()> {
    fs::write(path, model.to_json()?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<MoEModel> {
    MoEModel::from_json(&fs::read_to_string(path)?)
}
