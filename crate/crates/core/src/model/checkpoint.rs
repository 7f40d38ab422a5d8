//! Versioned binary checkpoints.
//!
//! Layout: the 8-byte magic `TRJGCKPT`, a little-endian `u32` version, a
//! little-endian `u64` header length, a JSON header (model config, optional
//! schedule and training state, tensor table), then every tensor as
//! row-major little-endian `f32` in table order. When the header says the
//! optimizer is stored, the Adam first moments follow, then the second
//! moments, in the same order.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::layers::ParamStore;
use super::train::{AdamW, EpochStats, Schedule, TrainState};
use super::{Model, ModelConfig};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"TRJGCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorInfo {
    name: String,
    rows: usize,
    cols: usize,
    decay: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    schedule: Option<Schedule>,
    epoch: usize,
    optimizer_step: u64,
    history: Vec<EpochStats>,
    has_optimizer: bool,
    tensors: Vec<TensorInfo>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub schedule: Option<Schedule>,
    pub state: Option<TrainState<f32>>,
}

fn write_tensor(out: &mut Vec<u8>, t: &Array2<f32>) {
    for v in t.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Writes atomically (temporary file, then rename).
pub fn save_checkpoint(path: &Path, model: &Model<f32>, schedule: Option<&Schedule>, state: Option<&TrainState<f32>>) -> Result<()> {
    let entries = model.params().entries();
    let header = Header {
        model: model.config().clone(),
        schedule: schedule.cloned(),
        epoch: state.map_or(0, |s| s.epoch),
        optimizer_step: state.map_or(0, |s| s.optimizer.step),
        history: state.map(|s| s.history.clone()).unwrap_or_default(),
        has_optimizer: state.is_some(),
        tensors: entries
            .iter()
            .map(|e| TensorInfo { name: e.name.clone(), rows: e.value.nrows(), cols: e.value.ncols(), decay: e.decay })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(24 + json.len() + 12 * model.params().size());
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for e in entries {
        write_tensor(&mut buf, &e.value);
    }
    if let Some(s) = state {
        for t in s.optimizer.m.iter().chain(&s.optimizer.v) {
            write_tensor(&mut buf, t);
        }
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&buf).and_then(|_| f.sync_all()).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
    source: String,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::parse(format!("{} byte {}", self.source, self.at), "unexpected end of checkpoint")
        })?;
        let out = &self.bytes[self.at..end];
        self.at = end;
        Ok(out)
    }

    fn tensor(&mut self, rows: usize, cols: usize) -> Result<Array2<f32>> {
        let raw = self.take(rows * cols * 4)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        Ok(Array2::from_shape_vec((rows, cols), data).expect("sized"))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(|e| Error::io(path, e))?;
    let source = path.display().to_string();
    let mut cur = Cursor { bytes: &bytes, at: 0, source: source.clone() };
    if cur.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::parse(source, "not a checkpoint (bad magic)"));
    }
    let version = u32::from_le_bytes(cur.take(4)?.try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::parse(source, format!("unsupported checkpoint version {version}")));
    }
    let len = u64::from_le_bytes(cur.take(8)?.try_into().expect("8 bytes")) as usize;
    let header: Header =
        serde_json::from_slice(cur.take(len)?).map_err(|e| Error::parse(format!("{source} header"), e.to_string()))?;
    let mut store = ParamStore::default();
    for t in &header.tensors {
        let value = cur.tensor(t.rows, t.cols)?;
        store.add(t.name.clone(), value, t.decay);
    }
    let state = if header.has_optimizer {
        let read_all = |cur: &mut Cursor| -> Result<Vec<Array2<f32>>> {
            header.tensors.iter().map(|t| cur.tensor(t.rows, t.cols)).collect()
        };
        let m = read_all(&mut cur)?;
        let v = read_all(&mut cur)?;
        Some(TrainState { epoch: header.epoch, optimizer: AdamW { m, v, step: header.optimizer_step }, history: header.history })
    } else {
        None
    };
    if cur.at != bytes.len() {
        return Err(Error::parse(source, format!("{} trailing bytes", bytes.len() - cur.at)));
    }
    let model = Model::from_params(header.model, store)?;
    Ok(Checkpoint { model, schedule: header.schedule, state })
}

