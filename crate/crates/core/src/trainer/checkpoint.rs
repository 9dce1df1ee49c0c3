//! Checkpoints: the policy text file plus a `.state.json` sidecar holding
//! the step counter, seed and optimizer moments.
//!
//! Every random stream is derived from `(seed, step, ...)`, so the seed and
//! step counter are the complete rng state.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::optim::{Optimizer, OptimizerConfig, OptimizerState};
use crate::policy::PolicyParams;

use super::TrainState;

pub const STATE_FORMAT: &str = "dagrpo-state v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateSidecar {
    pub format: String,
    pub step: u64,
    pub seed: u64,
    /// sha256 of the policy file contents.
    pub policy_sha256: String,
    pub optimizer: OptimizerState,
}

/// `<policy path>` → `<stem>.state.json` next to it.
pub fn sidecar_path(policy_path: &Path) -> PathBuf {
    policy_path.with_extension("state.json")
}

pub fn save_checkpoint(state: &TrainState, policy_path: &Path) -> Result<()> {
    let text = state.params.to_text();
    std::fs::write(policy_path, &text).map_err(|e| Error::io(policy_path, e))?;
    let sidecar = StateSidecar {
        format: STATE_FORMAT.to_string(),
        step: state.step,
        seed: state.seed,
        policy_sha256: hex::encode(Sha256::digest(text.as_bytes())),
        optimizer: state.optimizer.state(),
    };
    let path = sidecar_path(policy_path);
    let json = serde_json::to_string(&sidecar)?;
    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

pub fn load_checkpoint(policy_path: &Path, optimizer: OptimizerConfig) -> Result<TrainState> {
    let text = std::fs::read_to_string(policy_path).map_err(|e| Error::io(policy_path, e))?;
    let params = PolicyParams::from_text(&text).map_err(|e| Error::File {
        path: policy_path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let path = sidecar_path(policy_path);
    let raw = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let sidecar: StateSidecar = serde_json::from_str(&raw).map_err(|e| Error::File {
        path: path.clone(),
        reason: e.to_string(),
    })?;
    let bad = |reason: String| Error::File { path: path.clone(), reason };
    if sidecar.format != STATE_FORMAT {
        return Err(bad(format!("unsupported format {:?}", sidecar.format)));
    }
    if sidecar.policy_sha256 != hex::encode(Sha256::digest(text.as_bytes())) {
        return Err(bad("policy file does not match its state sidecar".into()));
    }
    Ok(TrainState {
        params,
        optimizer: Optimizer::restore(optimizer, &sidecar.optimizer)?,
        step: sidecar.step,
        seed: sidecar.seed,
    })
}
