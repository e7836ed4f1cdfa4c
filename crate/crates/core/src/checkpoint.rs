//! Trainer checkpoints.
//!
//! Layout: 8-byte magic, u32 version, u64 payload length, 32-byte SHA-256 of
//! the payload, then the payload as JSON. Floats are written in shortest
//! round-trip form, so every f64 reloads bit-identically.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::gpm::GpmMemory;
use crate::memory::BufferMemory;
use crate::nn::{MlpModel, OptimizerState};
use crate::owl::SeenTaskStats;
use crate::sscl::TrainerState;
use crate::SoulRng;

const MAGIC: &[u8; 8] = b"SOULCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub model: MlpModel,
    pub optimizer: OptimizerState,
    pub gpm: Option<GpmMemory>,
    pub memory: BufferMemory,
    pub stats: SeenTaskStats,
    pub rng: SoulRng,
    pub tasks_trained: usize,
}

impl Checkpoint {
    pub fn from_state(state: &TrainerState) -> Self {
        Checkpoint {
            model: state.model.clone(),
            optimizer: state.optimizer.clone(),
            gpm: state.gpm.clone(),
            memory: state.memory.clone(),
            stats: state.stats.clone(),
            rng: state.rng.clone(),
            tasks_trained: state.tasks_trained,
        }
    }

    /// Rebuilds a trainer; the teacher, previous-task exemplars and log start empty.
    pub fn into_state(self) -> TrainerState {
        TrainerState {
            model: self.model,
            teacher: None,
            gpm: self.gpm,
            memory: self.memory,
            stats: self.stats,
            optimizer: self.optimizer,
            rng: self.rng,
            prev_labeled: None,
            tasks_trained: self.tasks_trained,
            log: Default::default(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let payload = serde_json::to_vec(self)?;
        let mut out = Vec::with_capacity(payload.len() + 52);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&Sha256::digest(&payload));
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let header = 8 + 4 + 8 + 32;
        if bytes.len() < header || &bytes[..8] != MAGIC {
            return Err("not a checkpoint file".into());
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(format!("unsupported checkpoint version {version}"));
        }
        let len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let payload = &bytes[header..];
        if payload.len() != len {
            return Err(format!(
                "payload length {} != declared {len}",
                payload.len()
            ));
        }
        if Sha256::digest(payload).as_slice() != &bytes[20..52] {
            return Err("checksum mismatch".into());
        }
        serde_json::from_slice(payload).map_err(|e| e.to_string())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|reason| Error::Format {
            path: path.to_path_buf(),
            reason,
        })
    }
}
