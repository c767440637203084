//! Versioned binary checkpoints: magic, format version, configuration hash,
//! then a bincode payload.

use std::path::Path;

use conjflow_core::evalkit::TemplateMemory;
use conjflow_core::hierarchy::Hierarchy;
use conjflow_core::stream::Frame;
use conjflow_core::trainer::TrainerState;
use conjflow_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: [u8; 8] = *b"CJFLCKPT";
pub const VERSION: u32 = 1;
const HEADER: usize = 8 + 4 + 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub hierarchy: Hierarchy,
    pub state: TrainerState,
    /// Last frame consumed, `(t, pixels)`, so training resumes on the next pair.
    pub prev: Option<(u64, Tensor)>,
    pub templates: TemplateMemory,
}

impl Checkpoint {
    pub fn prev_frame(&self) -> Option<Frame> {
        self.prev.as_ref().map(|(t, pixels)| Frame {
            pixels: pixels.clone(),
            t: *t,
        })
    }

    pub fn to_bytes(&self, config_hash: &[u8; 32]) -> Result<Vec<u8>> {
        let payload = bincode::serialize(self).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut out = Vec::with_capacity(HEADER + payload.len());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(config_hash);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    /// Parses a checkpoint; with `expected` set, a different configuration
    /// hash is rejected.
    pub fn from_bytes(bytes: &[u8], expected: Option<&[u8; 32]>) -> Result<(Self, [u8; 32])> {
        if bytes.len() < HEADER || bytes[..8] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let hash: [u8; 32] = bytes[12..HEADER].try_into().unwrap();
        if expected.is_some_and(|e| *e != hash) {
            return Err(Error::ConfigMismatch);
        }
        let ckpt: Checkpoint = bincode::deserialize(&bytes[HEADER..]).map_err(|e| Error::Checkpoint(e.to_string()))?;
        ckpt.hierarchy.check_state(&ckpt.state.model)?;
        Ok((ckpt, hash))
    }

    pub fn save(&self, path: &Path, config_hash: &[u8; 32]) -> Result<()> {
        let bytes = self.to_bytes(config_hash)?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, bytes)?;
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path, expected: Option<&[u8; 32]>) -> Result<(Self, [u8; 32])> {
        Self::from_bytes(&std::fs::read(path)?, expected)
    }
}
