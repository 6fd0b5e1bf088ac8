//! Checkpoint file: a JSON document with the architecture, head layout and
//! training step, plus the parameters as base64 of little-endian `f64`s so
//! they round-trip bit-exactly.

use std::fs;
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{BackboneConfig, Dc3Model, HeadConfig, Network};

const FORMAT: &str = "dc3-checkpoint";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub step: usize,
    /// Whether the run trained the ambiguity head (false for vanilla SSL).
    pub dc3: bool,
    pub head: HeadConfig,
    pub backbone: BackboneConfig,
    pub network: Network,
    pub params: String,
}

impl Checkpoint {
    pub fn from_model(model: &Dc3Model, step: usize, dc3: bool) -> Self {
        let bytes: Vec<u8> = model
            .net
            .params
            .iter()
            .flat_map(|p| p.to_le_bytes())
            .collect();
        Checkpoint {
            format: FORMAT.into(),
            version: VERSION,
            step,
            dc3,
            head: model.head,
            backbone: model.backbone.clone(),
            network: model.net.clone(),
            params: STANDARD.encode(bytes),
        }
    }

    pub fn into_model(self) -> Result<Dc3Model> {
        if self.format != FORMAT || self.version != VERSION {
            return Err(Error::InvalidCheckpoint(format!(
                "unsupported format {} v{}",
                self.format, self.version
            )));
        }
        let bytes = STANDARD
            .decode(self.params.as_bytes())
            .map_err(|e| Error::InvalidCheckpoint(e.to_string()))?;
        if bytes.len() % 8 != 0 {
            return Err(Error::InvalidCheckpoint("truncated parameters".into()));
        }
        let params: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let mut net = self.network;
        if params.len() != net.num_params() {
            return Err(Error::InvalidCheckpoint(format!(
                "{} parameters stored, architecture needs {}",
                params.len(),
                net.num_params()
            )));
        }
        if net.output_dim() != self.head.raw_len() {
            return Err(Error::InvalidCheckpoint("head does not match output layer".into()));
        }
        net.params = params;
        Ok(Dc3Model {
            head: self.head,
            backbone: self.backbone,
            net,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| Error::json(path, e))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }
}
