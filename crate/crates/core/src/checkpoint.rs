//! Versioned JSON snapshots of the full model state.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trainer::{ModelState, TrainConfig};

pub const FORMAT: &str = "hiergcd-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config_hash: u64,
    pub config: TrainConfig,
    pub state: ModelState,
}

impl Checkpoint {
    pub fn new(cfg: &TrainConfig, state: &ModelState) -> Self {
        Self {
            format: FORMAT.to_string(),
            version: VERSION,
            config_hash: cfg.hash(),
            config: cfg.clone(),
            state: state.clone(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Header {
            format: String,
            version: u32,
        }
        let header: Header = serde_json::from_str(text).map_err(|e| Error::Serde(e.to_string()))?;
        if header.format != FORMAT {
            return Err(Error::Serde(format!("not a checkpoint: format {:?}", header.format)));
        }
        if header.version != VERSION {
            return Err(Error::Serde(format!(
                "checkpoint version {} is not supported (expected {VERSION})",
                header.version
            )));
        }
        let ck: Self = serde_json::from_str(text).map_err(|e| Error::Serde(e.to_string()))?;
        if ck.config.hash() != ck.config_hash {
            return Err(Error::Serde("checkpoint config hash does not match its config".into()));
        }
        Ok(ck)
    }

    /// Writes to a temporary sibling first so an interrupted save never
    /// leaves a truncated checkpoint behind.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, self.to_json()?).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
