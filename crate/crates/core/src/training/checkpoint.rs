//! Checkpoint files.
//!
//! Layout: `DFCK`, format version (u32 LE), header length (u64 LE), JSON
//! header, little-endian tensor payload, then a SHA-256 of every preceding
//! byte.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{EpochMetrics, StopReason, TrainState};
use crate::error::{CheckpointError, Error, Result};
use crate::model::{HybridModel, HybridModelConfig, ParamStore};
use crate::numerics::{numel, DType, Real, RunningStats, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DFCK";
pub const CHECKPOINT_VERSION: u32 = 1;

const PREFIX_LEN: usize = 16;
const DIGEST_LEN: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Role {
    Param,
    RunningMean,
    RunningVar,
    Velocity,
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    role: Role,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SavedState {
    epoch: usize,
    history: Vec<EpochMetrics>,
    seed: u64,
    best_epoch: Option<usize>,
    stop_reason: Option<StopReason>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    dtype: DType,
    config: HybridModelConfig,
    config_hash: String,
    tensors: Vec<Entry>,
    state: Option<SavedState>,
}

/// A model with, optionally, the optimizer state it was saved with.
#[derive(Clone, Debug)]
pub struct Checkpoint<T: Real> {
    pub model: HybridModel<T>,
    pub state: Option<TrainState<T>>,
}

fn corrupt(msg: impl Into<String>) -> Error {
    CheckpointError::Corrupt(msg.into()).into()
}

fn put<T: Real>(payload: &mut Vec<u8>, values: &[T]) {
    for v in values {
        match T::DTYPE {
            DType::F32 => payload.extend_from_slice(&(v.to_bits_u64() as u32).to_le_bytes()),
            DType::F64 => payload.extend_from_slice(&v.to_bits_u64().to_le_bytes()),
        }
    }
}

fn take<T: Real>(bytes: &[u8]) -> Vec<T> {
    match T::DTYPE {
        DType::F32 => {
            bytes.chunks_exact(4).map(|c| T::of(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)).collect()
        }
        DType::F64 => {
            bytes.chunks_exact(8).map(|c| T::of(f64::from_le_bytes(c.try_into().expect("8 bytes")))).collect()
        }
    }
}

/// Writes `model` (and `state` if given) to `path`, replacing it atomically.
pub fn save_checkpoint<T: Real>(path: &Path, model: &HybridModel<T>, state: Option<&TrainState<T>>) -> Result<()> {
    let mut tensors = Vec::new();
    let mut payload = Vec::new();
    for (name, t) in model.params.iter() {
        tensors.push(Entry { name: name.to_string(), role: Role::Param, shape: t.shape().to_vec() });
        put(&mut payload, t.data());
    }
    for (name, r) in model.params.running_iter() {
        tensors.push(Entry { name: name.to_string(), role: Role::RunningMean, shape: vec![r.mean.len()] });
        put(&mut payload, &r.mean);
        tensors.push(Entry { name: name.to_string(), role: Role::RunningVar, shape: vec![r.var.len()] });
        put(&mut payload, &r.var);
    }
    if let Some(s) = state {
        if s.velocities.len() != model.params.len() {
            return Err(Error::Usage("train state does not match the model's parameters".into()));
        }
        for ((name, _), v) in model.params.iter().zip(&s.velocities) {
            tensors.push(Entry { name: name.to_string(), role: Role::Velocity, shape: v.shape().to_vec() });
            put(&mut payload, v.data());
        }
    }
    let header = Header {
        dtype: T::DTYPE,
        config: model.config.clone(),
        config_hash: model.config.hash(),
        tensors,
        state: state.map(|s| SavedState {
            epoch: s.epoch,
            history: s.history.clone(),
            seed: s.seed,
            best_epoch: s.best_epoch,
            stop_reason: s.stop_reason,
        }),
    };
    let header = serde_json::to_vec(&header).map_err(|e| Error::json("checkpoint header", e))?;
    let mut bytes = Vec::with_capacity(PREFIX_LEN + header.len() + payload.len() + DIGEST_LEN);
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header);
    bytes.extend_from_slice(&payload);
    let digest = Sha256::digest(&bytes);
    bytes.extend_from_slice(&digest);

    let tmp = path.with_extension("tmp");
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| Error::io(format!("writing checkpoint {}", path.display()), e))
}

/// Reads a checkpoint. With `expected` set, a file saved for a different
/// architecture is refused.
pub fn load_checkpoint<T: Real>(path: &Path, expected: Option<&HybridModelConfig>) -> Result<Checkpoint<T>> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(CheckpointError::NotFound(path.to_path_buf()).into())
        }
        Err(e) => return Err(Error::io(format!("reading checkpoint {}", path.display()), e)),
    };
    if bytes.len() < PREFIX_LEN + DIGEST_LEN || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(corrupt("missing DFCK signature or file too short"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(corrupt("checksum mismatch (truncated or modified file)"));
    }
    let version = u32::from_le_bytes(body[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version { found: version, expected: CHECKPOINT_VERSION }.into());
    }
    let header_len = u64::from_le_bytes(body[8..16].try_into().expect("8 bytes")) as usize;
    let header_end = PREFIX_LEN
        .checked_add(header_len)
        .filter(|&e| e <= body.len())
        .ok_or_else(|| corrupt("header overruns file"))?;
    let header: Header =
        serde_json::from_slice(&body[PREFIX_LEN..header_end]).map_err(|e| corrupt(format!("bad header: {e}")))?;
    if header.dtype != T::DTYPE {
        return Err(CheckpointError::Dtype { found: header.dtype.to_string(), expected: T::DTYPE.to_string() }.into());
    }
    if header.config.hash() != header.config_hash {
        return Err(corrupt("stored config does not match its hash"));
    }
    if let Some(cfg) = expected {
        let want = cfg.hash();
        if want != header.config_hash {
            return Err(CheckpointError::ConfigMismatch { found: header.config_hash, expected: want }.into());
        }
    }

    let payload = &body[header_end..];
    let width = T::DTYPE.size_of();
    let total: usize = header.tensors.iter().map(|e| numel(&e.shape)).sum();
    if total * width != payload.len() {
        return Err(corrupt(format!("payload holds {} bytes, header describes {}", payload.len(), total * width)));
    }
    let mut params = ParamStore::new();
    let mut velocities = Vec::new();
    let mut pending_mean: Option<(String, Vec<T>)> = None;
    let mut offset = 0;
    for e in &header.tensors {
        let n = numel(&e.shape);
        let values = take::<T>(&payload[offset * width..(offset + n) * width]);
        offset += n;
        match e.role {
            Role::Param => params.insert(e.name.clone(), Tensor::new(e.shape.clone(), values)?),
            Role::RunningMean => pending_mean = Some((e.name.clone(), values)),
            Role::RunningVar => match pending_mean.take() {
                Some((name, mean)) if name == e.name && mean.len() == values.len() => {
                    params.insert_running(name, RunningStats { mean, var: values })
                }
                _ => return Err(corrupt(format!("running variance of '{}' without its mean", e.name))),
            },
            Role::Velocity => velocities.push(Tensor::new(e.shape.clone(), values)?),
        }
    }
    if params.is_empty() {
        return Err(corrupt("no parameters stored"));
    }
    let state = match header.state {
        Some(s) => {
            let shapes_match = velocities.len() == params.len()
                && params.iter().zip(&velocities).all(|((_, p), v)| p.shape() == v.shape());
            if !shapes_match {
                return Err(corrupt("velocity buffers do not mirror the parameters"));
            }
            Some(TrainState {
                epoch: s.epoch,
                velocities,
                history: s.history,
                seed: s.seed,
                best_epoch: s.best_epoch,
                stop_reason: s.stop_reason,
            })
        }
        None => None,
    };
    Ok(Checkpoint { model: HybridModel { config: header.config, params }, state })
}
