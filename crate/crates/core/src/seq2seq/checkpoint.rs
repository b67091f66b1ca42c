//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        8 bytes   "CURRCKPT"
//! version      u32       1
//! header_len   u64       length of the JSON header in bytes
//! header       JSON      config, config hash, step counters, LR schedule,
//!                        batching budget, RNG state, tensor names and shapes
//! parameters   f64 * n   every tensor in model order, row-major
//! adam m       f64 * n   same order
//! adam v       f64 * n   same order
//! ```
//!
//! The tensor order is the one documented in [`super::model`]. Writing the
//! same state twice produces identical bytes.

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use super::model::{ModelConfig, ModelParameters, TENSOR_NAMES};
use super::optim::{AdamState, LrSchedule};
use super::tensor::Matrix;
use super::train::TrainState;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"CURRCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorInfo {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: ModelConfig,
    config_hash: String,
    step: u64,
    adam_t: u64,
    lr_origin: u64,
    schedule: LrSchedule,
    max_tokens: usize,
    rng_seed: String,
    rng_stream: u64,
    /// u128 as a decimal string; JSON numbers cannot carry it.
    rng_word_pos: String,
    tensors: Vec<TensorInfo>,
}

pub fn checkpoint_bytes(state: &TrainState) -> Vec<u8> {
    let config = &state.params.config;
    let header = Header {
        config: config.clone(),
        config_hash: config.hash(),
        step: state.step,
        adam_t: state.adam.t,
        lr_origin: state.lr_origin,
        schedule: state.schedule,
        max_tokens: state.max_tokens,
        rng_seed: hex::encode(state.rng.get_seed()),
        rng_stream: state.rng.get_stream(),
        rng_word_pos: state.rng.get_word_pos().to_string(),
        tensors: state
            .params
            .tensors
            .iter()
            .zip(TENSOR_NAMES)
            .map(|(t, name)| TensorInfo {
                name: name.to_string(),
                rows: t.rows,
                cols: t.cols,
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let n = state.params.num_values();
    let mut out = Vec::with_capacity(20 + json.len() + 24 * n);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for group in [&state.params.tensors, &state.adam.m, &state.adam.v] {
        for t in group.iter() {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, checkpoint_bytes(state)).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Incompatible("checkpoint is truncated".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn tensors(&mut self, shapes: &[(usize, usize)]) -> Result<Vec<Matrix>> {
        shapes
            .iter()
            .map(|&(r, c)| {
                let raw = self.take(8 * r * c)?;
                let data = raw
                    .chunks_exact(8)
                    .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
                    .collect();
                Ok(Matrix::from_vec(r, c, data))
            })
            .collect()
    }
}

pub fn parse_checkpoint(bytes: &[u8], expected: Option<&ModelConfig>) -> Result<TrainState> {
    let mut rd = Reader { bytes, pos: 0 };
    if rd.take(8)? != MAGIC {
        return Err(Error::Incompatible("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(rd.take(4)?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Incompatible(format!("unsupported checkpoint version {version}")));
    }
    let len = u64::from_le_bytes(rd.take(8)?.try_into().expect("8 bytes")) as usize;
    let header: Header = serde_json::from_slice(rd.take(len)?)
        .map_err(|e| Error::Incompatible(format!("bad checkpoint header: {e}")))?;
    if header.config.hash() != header.config_hash {
        return Err(Error::Incompatible("checkpoint config hash does not match its config".into()));
    }
    if let Some(cfg) = expected {
        if cfg.hash() != header.config_hash {
            return Err(Error::Incompatible(format!(
                "checkpoint was written for model config {} but {} was expected",
                header.config_hash,
                cfg.hash()
            )));
        }
    }
    let shapes = header.config.tensor_shapes();
    let declared: Vec<(usize, usize)> = header.tensors.iter().map(|t| (t.rows, t.cols)).collect();
    if declared != shapes {
        return Err(Error::Incompatible("checkpoint tensor shapes disagree with its config".into()));
    }
    let params = ModelParameters {
        config: header.config.clone(),
        tensors: rd.tensors(&shapes)?,
    };
    let m = rd.tensors(&shapes)?;
    let v = rd.tensors(&shapes)?;
    if rd.pos != bytes.len() {
        return Err(Error::Incompatible("trailing bytes after checkpoint data".into()));
    }

    let seed: [u8; 32] = hex::decode(&header.rng_seed)
        .ok()
        .and_then(|b| b.try_into().ok())
        .ok_or_else(|| Error::Incompatible("bad RNG seed in checkpoint".into()))?;
    let word_pos: u128 = header
        .rng_word_pos
        .parse()
        .map_err(|_| Error::Incompatible("bad RNG position in checkpoint".into()))?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(header.rng_stream);
    rng.set_word_pos(word_pos);

    Ok(TrainState::from_parts(
        params,
        AdamState { m, v, t: header.adam_t },
        header.step,
        header.lr_origin,
        header.schedule,
        header.max_tokens,
        rng,
    ))
}

pub fn load_checkpoint(path: &Path, expected: Option<&ModelConfig>) -> Result<TrainState> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_checkpoint(&bytes, expected).map_err(|e| e.context(format!("loading {}", path.display())))
}

/// Elementwise mean of the parameters of compatible checkpoints.
pub fn average_checkpoints<P: AsRef<Path>>(paths: &[P]) -> Result<ModelParameters> {
    let (first, rest) = paths
        .split_first()
        .ok_or_else(|| Error::Argument("no checkpoints to average".into()))?;
    let mut acc = load_checkpoint(first.as_ref(), None)?.params;
    for p in rest {
        let next = load_checkpoint(p.as_ref(), Some(&acc.config))?.params;
        for (a, b) in acc.tensors.iter_mut().zip(&next.tensors) {
            a.add_assign(b);
        }
    }
    let k = 1.0 / paths.len() as f64;
    for t in acc.tensors.iter_mut() {
        t.scale(k);
    }
    Ok(acc)
}
