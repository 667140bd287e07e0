//! Versioned checkpoint container: named parameter blocks with explicit
//! frozen/trainable flags, schedule constants, and a SHA-256 content hash.
//!
//! Layout (JSON):
//! ```json
//! {
//!   "version": 1,
//!   "model": { ...ModelConfig... },
//!   "schedule": { "steps": 1000, "beta1": 1e-4, "beta_t": 0.02 },
//!   "blocks": [
//!     { "name": "embed_w", "shape": [4,64], "frozen": true, "data": "<base64 LE f64>" },
//!     ...
//!   ],
//!   "content_hash": "<sha256 hex over name|shape|frozen|bytes in order>"
//! }
//! ```
//! Loading rejects version/hash mismatches and any disagreement between the
//! stored frozen flags and the code's frozen/trainable partition.

use std::path::Path;

use base64::Engine;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{DenoiserParams, ModelConfig};
use crate::schedule::{make_schedule, NoiseSchedule};
use crate::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct BlockEntry {
    name: String,
    shape: Vec<usize>,
    frozen: bool,
    data: String,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    version: u32,
    model: ModelConfig,
    schedule: ScheduleEntry,
    blocks: Vec<BlockEntry>,
    content_hash: String,
}

#[derive(Serialize, Deserialize)]
struct ScheduleEntry {
    steps: usize,
    beta1: f64,
    beta_t: f64,
}

fn hash_blocks(model_json: &str, blocks: &[BlockEntry]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(model_json.as_bytes());
    for b in blocks {
        hasher.update(b.name.as_bytes());
        hasher.update(format!("{:?}", b.shape).as_bytes());
        hasher.update([b.frozen as u8]);
        hasher.update(b.data.as_bytes());
    }
    hex::encode(hasher.finalize())
}

/// Hash of the current parameter values (optionally frozen blocks only);
/// the freeze-contract tests compare these across training.
pub fn params_hash(params: &DenoiserParams, frozen_only: bool) -> String {
    let mut hasher = Sha256::new();
    params.visit(|name, tensor, frozen| {
        if frozen_only && !frozen {
            return;
        }
        hasher.update(name.as_bytes());
        hasher.update(tensor.le_bytes());
    });
    hex::encode(hasher.finalize())
}

pub fn save(params: &DenoiserParams, schedule: &NoiseSchedule, path: &Path) -> Result<()> {
    let engine = base64::engine::general_purpose::STANDARD;
    let mut blocks = Vec::new();
    params.visit(|name, tensor, frozen| {
        blocks.push(BlockEntry {
            name: name.to_string(),
            shape: tensor.shape().to_vec(),
            frozen,
            data: engine.encode(tensor.le_bytes()),
        });
    });
    let model_json =
        serde_json::to_string(&params.cfg).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let content_hash = hash_blocks(&model_json, &blocks);
    let file = CheckpointFile {
        version: CHECKPOINT_VERSION,
        model: params.cfg.clone(),
        schedule: ScheduleEntry {
            steps: schedule.steps,
            beta1: schedule.beta1,
            beta_t: schedule.beta_t,
        },
        blocks,
        content_hash,
    };
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let json = serde_json::to_string(&file).map_err(|e| Error::Checkpoint(e.to_string()))?;
    std::fs::write(path, json)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(DenoiserParams, NoiseSchedule)> {
    let text = std::fs::read_to_string(path)?;
    let file: CheckpointFile =
        serde_json::from_str(&text).map_err(|e| Error::Checkpoint(e.to_string()))?;
    if file.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {} (expected {CHECKPOINT_VERSION})",
            file.version
        )));
    }
    let model_json =
        serde_json::to_string(&file.model).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let expect = hash_blocks(&model_json, &file.blocks);
    if expect != file.content_hash {
        return Err(Error::Checkpoint("content hash mismatch".into()));
    }

    let engine = base64::engine::general_purpose::STANDARD;
    let mut params = DenoiserParams::init(file.model.clone(), 0)?;
    let mut stored: std::collections::HashMap<&str, &BlockEntry> =
        file.blocks.iter().map(|b| (b.name.as_str(), b)).collect();
    for (name, tensor, frozen) in params.all_params_mut() {
        let entry = stored.remove(name.as_str()).ok_or_else(|| {
            Error::Checkpoint(format!("missing parameter block {name:?}"))
        })?;
        if entry.frozen != frozen {
            return Err(Error::Checkpoint(format!(
                "frozen flag mismatch for {name:?}: checkpoint says {}, model says {frozen}",
                entry.frozen
            )));
        }
        let raw = engine
            .decode(&entry.data)
            .map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
        if raw.len() % 8 != 0 {
            return Err(Error::Checkpoint(format!("{name}: truncated data")));
        }
        let values: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        *tensor = Tensor::from_f64_slice(entry.shape.clone(), &values)
            .map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
    }
    if let Some(extra) = stored.keys().next() {
        return Err(Error::Checkpoint(format!("unknown parameter block {extra:?}")));
    }
    let schedule = make_schedule(file.schedule.steps, file.schedule.beta1, file.schedule.beta_t)?;
    Ok((params, schedule))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn save_load_roundtrip_and_tamper_detection() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt.json");
        let params = DenoiserParams::init(ModelConfig::gradcheck(), 3).unwrap();
        let schedule = make_schedule(100, 1e-4, 0.02).unwrap();
        save(&params, &schedule, &path).unwrap();

        let (loaded, sched) = load(&path).unwrap();
        assert_eq!(sched.steps, 100);
        assert_eq!(params_hash(&params, false), params_hash(&loaded, false));

        // Flip one byte inside a data block: hash must catch it.
        let mut text = std::fs::read_to_string(&path).unwrap();
        let pos = text.find("\"data\":\"").unwrap() + 10;
        let byte = text.as_bytes()[pos];
        let replacement = if byte == b'A' { 'B' } else { 'A' };
        text.replace_range(pos..pos + 1, &replacement.to_string());
        std::fs::write(&path, text).unwrap();
        assert!(matches!(load(&path), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn frozen_partition_is_enforced() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt.json");
        let params = DenoiserParams::init(ModelConfig::gradcheck(), 3).unwrap();
        let schedule = make_schedule(100, 1e-4, 0.02).unwrap();
        save(&params, &schedule, &path).unwrap();

        // Flip a frozen flag and re-hash so only the partition check fires.
        let text = std::fs::read_to_string(&path).unwrap();
        let mut file: CheckpointFile = serde_json::from_str(&text).unwrap();
        file.blocks[0].frozen = !file.blocks[0].frozen;
        let model_json = serde_json::to_string(&file.model).unwrap();
        file.content_hash = hash_blocks(&model_json, &file.blocks);
        std::fs::write(&path, serde_json::to_string(&file).unwrap()).unwrap();
        let err = load(&path).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(msg) if msg.contains("frozen flag")));
    }
}
