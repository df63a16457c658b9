use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, TrainConfig};
use crate::error::{Error, Result};
use crate::loss::MemoryBank;

pub const CHECKPOINT_VERSION: u32 = 1;

/// Parameters, banks and config after `epoch` completed epochs. Floats are
/// written with round-trip precision, so save then load is exact.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: TrainConfig,
    pub epoch: usize,
    pub model: Model,
    pub bank: MemoryBank,
    pub bank2: MemoryBank,
    pub best_map: f64,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text)?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::InvalidArgument(format!(
                "{}: checkpoint version {} (expected {CHECKPOINT_VERSION})",
                path.display(),
                ck.version
            )));
        }
        Ok(ck)
    }
}
