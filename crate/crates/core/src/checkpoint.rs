//! Binary checkpoint format.
//!
//! Layout: `HCAN1`, a little-endian u64 manifest length, the UTF-8 JSON
//! manifest, then every tensor as little-endian f32 in manifest order.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{HcanModel, ModelConfig};
use crate::params::ParamStore;
use crate::tensor::Array;
use crate::trainer::{Adam, EpochRecord, TrainConfig, TrainState};

pub const MAGIC: &[u8; 5] = b"HCAN1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not an HCAN checkpoint or unsupported version: {0}")]
    Version(String),
    #[error("truncated checkpoint: {0}")]
    Truncated(String),
    #[error("manifest and blob disagree: {0}")]
    LengthMismatch(String),
    #[error("invalid manifest: {0}")]
    Manifest(String),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the blob, in f32 elements.
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: Vec<u8>,
    pub stream: u64,
    /// Decimal string; the word position is 128-bit.
    pub word_pos: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SavedTrainState {
    pub epoch: usize,
    pub best_f1: Option<f64>,
    pub bad_epochs: usize,
    pub stopped: bool,
    pub adam_step: u64,
    pub rng: RngState,
    pub history: Vec<EpochRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub config: Option<TrainConfig>,
    pub model_config: ModelConfig,
    pub labels: Vec<String>,
    pub tensors: Vec<TensorEntry>,
    pub train_state: Option<SavedTrainState>,
}

/// A loaded checkpoint: the selected model plus, when present, the state
/// needed to resume training.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: HcanModel,
    pub labels: Vec<String>,
    pub config: Option<TrainConfig>,
    pub train_state: Option<TrainState>,
}

fn rng_state(rng: &ChaCha8Rng) -> RngState {
    RngState {
        seed: rng.get_seed().to_vec(),
        stream: rng.get_stream(),
        word_pos: rng.get_word_pos().to_string(),
    }
}

fn restore_rng(s: &RngState) -> Result<ChaCha8Rng, CheckpointError> {
    let seed: [u8; 32] = s
        .seed
        .as_slice()
        .try_into()
        .map_err(|_| CheckpointError::Manifest("rng seed must be 32 bytes".into()))?;
    let pos: u128 = s
        .word_pos
        .parse()
        .map_err(|_| CheckpointError::Manifest(format!("bad rng word position `{}`", s.word_pos)))?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(s.stream);
    rng.set_word_pos(pos);
    Ok(rng)
}

struct BlobWriter {
    tensors: Vec<TensorEntry>,
    blob: Vec<u8>,
    offset: usize,
}

impl BlobWriter {
    fn push(&mut self, name: String, a: &Array) {
        for &v in a.data() {
            self.blob.extend_from_slice(&(v as f32).to_le_bytes());
        }
        self.tensors.push(TensorEntry {
            name,
            shape: a.shape().to_vec(),
            offset: self.offset,
            len: a.len(),
        });
        self.offset += a.len();
    }

    fn push_store(&mut self, prefix: &str, store: &ParamStore, values: &[Array]) {
        for (name, a) in store.names().iter().zip(values) {
            self.push(format!("{prefix}{name}"), a);
        }
    }
}

/// Serializes a model alone (no resumable state).
pub fn encode_model(model: &HcanModel, labels: &[String], config: Option<&TrainConfig>) -> Vec<u8> {
    encode(model, labels, config, None)
}

/// Serializes a training run: the best model under `param.*` plus current
/// parameters, optimizer moments, rng and history.
pub fn encode_training(state: &TrainState, labels: &[String], config: &TrainConfig) -> Vec<u8> {
    encode(&state.best, labels, Some(config), Some(state))
}

fn encode(best: &HcanModel, labels: &[String], config: Option<&TrainConfig>, state: Option<&TrainState>) -> Vec<u8> {
    let mut w = BlobWriter {
        tensors: Vec::new(),
        blob: Vec::new(),
        offset: 0,
    };
    w.push_store("param.", best.store(), best.store().values());
    let train_state = state.map(|st| {
        let store = st.model.store();
        w.push_store("current.", store, store.values());
        w.push_store("adam.m.", store, &st.optimizer.m);
        w.push_store("adam.v.", store, &st.optimizer.v);
        SavedTrainState {
            epoch: st.epoch,
            best_f1: st.best_f1,
            bad_epochs: st.bad_epochs,
            stopped: st.stopped,
            adam_step: st.optimizer.step,
            rng: rng_state(&st.rng),
            history: st.history.clone(),
        }
    });
    let manifest = Manifest {
        version: FORMAT_VERSION,
        config: config.cloned(),
        model_config: best.config().clone(),
        labels: labels.to_vec(),
        tensors: w.tensors,
        train_state,
    };
    let json = serde_json::to_vec(&manifest).expect("manifest serializes");
    let mut out = Vec::with_capacity(5 + 8 + json.len() + w.blob.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&w.blob);
    out
}

/// Splits raw bytes into manifest and blob floats, validating framing.
pub fn parse(bytes: &[u8]) -> Result<(Manifest, Vec<f32>), CheckpointError> {
    if bytes.len() < 5 || &bytes[..5] != MAGIC {
        return Err(CheckpointError::Version("bad magic header".into()));
    }
    if bytes.len() < 13 {
        return Err(CheckpointError::Truncated("missing manifest length".into()));
    }
    let mlen = u64::from_le_bytes(bytes[5..13].try_into().expect("8 bytes")) as usize;
    let rest = &bytes[13..];
    if rest.len() < mlen {
        return Err(CheckpointError::Truncated(format!(
            "manifest declares {mlen} bytes, {} available",
            rest.len()
        )));
    }
    let manifest: Manifest =
        serde_json::from_slice(&rest[..mlen]).map_err(|e| CheckpointError::Manifest(e.to_string()))?;
    if manifest.version != FORMAT_VERSION {
        return Err(CheckpointError::Version(format!(
            "format version {} (expected {FORMAT_VERSION})",
            manifest.version
        )));
    }
    let blob = &rest[mlen..];
    if blob.len() % 4 != 0 {
        return Err(CheckpointError::Truncated(format!("blob of {} bytes is not whole f32s", blob.len())));
    }
    let floats: Vec<f32> = blob
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let mut expected = 0;
    for t in &manifest.tensors {
        if t.offset != expected || t.shape.iter().product::<usize>() != t.len {
            return Err(CheckpointError::Manifest(format!("tensor `{}` has inconsistent offset/shape", t.name)));
        }
        expected += t.len;
    }
    if expected > floats.len() {
        return Err(CheckpointError::Truncated(format!(
            "manifest describes {expected} values, blob holds {}",
            floats.len()
        )));
    }
    if expected != floats.len() {
        return Err(CheckpointError::LengthMismatch(format!(
            "manifest describes {expected} values, blob holds {}",
            floats.len()
        )));
    }
    Ok((manifest, floats))
}

fn fill(prefix: &str, store: &ParamStore, manifest: &Manifest, floats: &[f32]) -> Result<Vec<Array>, CheckpointError> {
    store
        .names()
        .iter()
        .zip(store.values())
        .map(|(name, like)| {
            let key = format!("{prefix}{name}");
            let t = manifest
                .tensors
                .iter()
                .find(|t| t.name == key)
                .ok_or_else(|| CheckpointError::Manifest(format!("missing tensor `{key}`")))?;
            if t.shape != like.shape() {
                return Err(CheckpointError::Manifest(format!(
                    "tensor `{key}` has shape {:?}, model expects {:?}",
                    t.shape,
                    like.shape()
                )));
            }
            let data = floats[t.offset..t.offset + t.len].iter().map(|&v| v as f64).collect();
            Ok(Array::new(t.shape.clone(), data).expect("shape checked"))
        })
        .collect()
}

fn model_with(config: &ModelConfig, values: Vec<Array>) -> Result<HcanModel, CheckpointError> {
    let mut m = HcanModel::new(config.clone(), 0).map_err(|e| CheckpointError::Manifest(e.to_string()))?;
    let ids: Vec<_> = m.store().ids().collect();
    for (id, v) in ids.into_iter().zip(values) {
        *m.store_mut().value_mut(id) = v;
    }
    Ok(m)
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    let (manifest, floats) = parse(bytes)?;
    let shell = HcanModel::new(manifest.model_config.clone(), 0).map_err(|e| CheckpointError::Manifest(e.to_string()))?;
    let store = shell.store();
    let model = model_with(&manifest.model_config, fill("param.", store, &manifest, &floats)?)?;
    let train_state = match &manifest.train_state {
        None => None,
        Some(s) => {
            let current = model_with(&manifest.model_config, fill("current.", store, &manifest, &floats)?)?;
            let lr = manifest.config.as_ref().map_or(1e-4, |c| c.learning_rate);
            let mut optimizer = Adam::new(store, lr);
            optimizer.step = s.adam_step;
            optimizer.m = fill("adam.m.", store, &manifest, &floats)?;
            optimizer.v = fill("adam.v.", store, &manifest, &floats)?;
            Some(TrainState {
                model: current,
                best: model.clone(),
                best_f1: s.best_f1,
                bad_epochs: s.bad_epochs,
                epoch: s.epoch,
                stopped: s.stopped,
                optimizer,
                rng: restore_rng(&s.rng)?,
                history: s.history.clone(),
            })
        }
    };
    Ok(Checkpoint {
        model,
        labels: manifest.labels,
        config: manifest.config,
        train_state,
    })
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CheckpointError> {
    let io = |source| CheckpointError::Io {
        context: format!("writing {}", path.display()),
        source,
    };
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(io)?;
    f.write_all(bytes).map_err(io)?;
    f.sync_all().map_err(io)?;
    fs::rename(&tmp, path).map_err(io)
}

pub fn save_model(path: &Path, model: &HcanModel, labels: &[String], config: Option<&TrainConfig>) -> Result<(), CheckpointError> {
    write_atomic(path, &encode_model(model, labels, config))
}

pub fn save_training(path: &Path, state: &TrainState, labels: &[String], config: &TrainConfig) -> Result<(), CheckpointError> {
    write_atomic(path, &encode_training(state, labels, config))
}

pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        context: format!("reading {}", path.display()),
        source,
    })?;
    decode(&bytes)
}
