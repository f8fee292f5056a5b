//! Checkpoint container.
//!
//! Layout: the 8 bytes `COSODCK1`, a little-endian `u64` header length, a
//! JSON [`CheckpointHeader`], then every tensor listed in the header as
//! consecutive little-endian values of the header's `dtype`. Parameters
//! come first, followed by the optimizer's first (`adam.m.*`) and second
//! (`adam.v.*`) moments.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{create_file, Adam, LogRecord, TrainState};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"COSODCK1";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Element offset into the payload.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub dtype: String,
    pub config: ExperimentConfig,
    pub seed: u64,
    pub epoch: u64,
    pub step: u64,
    pub adam_step: u64,
    pub history: Vec<LogRecord>,
    pub tensors: Vec<TensorEntry>,
}

fn element_size(dtype: &str) -> Result<usize> {
    match dtype {
        "f32" => Ok(4),
        "f64" => Ok(8),
        other => Err(Error::Checkpoint(format!("unsupported dtype `{other}`"))),
    }
}

pub fn write_checkpoint<T: Scalar>(w: &mut impl Write, cfg: &ExperimentConfig, state: &TrainState<T>) -> Result<()> {
    let params = &state.model.params;
    let mut tensors: Vec<(String, &Tensor<T>)> = params.iter().map(|p| (p.name.clone(), &p.value)).collect();
    for (p, m) in params.iter().zip(&state.adam.m) {
        tensors.push((format!("adam.m.{}", p.name), m));
    }
    for (p, v) in params.iter().zip(&state.adam.v) {
        tensors.push((format!("adam.v.{}", p.name), v));
    }
    let mut offset = 0;
    let entries = tensors
        .iter()
        .map(|(name, t)| {
            let e = TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
            };
            offset += t.numel();
            e
        })
        .collect();
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        dtype: T::NAME.to_string(),
        config: cfg.clone(),
        seed: cfg.train.seed,
        epoch: state.epoch,
        step: state.step,
        adam_step: state.adam.step,
        history: state.history.clone(),
        tensors: entries,
    };
    let json = serde_json::to_vec(&header)?;
    let io = |e| Error::Checkpoint(format!("write failed: {e}"));
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&(json.len() as u64).to_le_bytes()).map_err(io)?;
    w.write_all(&json).map_err(io)?;
    let mut buf = Vec::with_capacity(offset * element_size(T::NAME)?);
    for (_, t) in &tensors {
        for &v in t.data() {
            if T::NAME == "f32" {
                buf.extend_from_slice(&v.to_f32().expect("f32").to_le_bytes());
            } else {
                buf.extend_from_slice(&v.to_f64().expect("f64").to_le_bytes());
            }
        }
    }
    w.write_all(&buf).map_err(io)?;
    Ok(())
}

pub fn save_checkpoint<T: Scalar>(path: &Path, cfg: &ExperimentConfig, state: &TrainState<T>) -> Result<()> {
    let mut w = create_file(path)?;
    write_checkpoint(&mut w, cfg, state)?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a checkpoint into scalar type `T`. Values stored in another
/// precision are converted.
pub fn read_checkpoint<T: Scalar>(r: &mut impl Read) -> Result<(ExperimentConfig, TrainState<T>)> {
    let bad = |what: String| Error::Checkpoint(what);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|e| bad(format!("truncated magic: {e}")))?;
    if &magic != MAGIC {
        return Err(bad("not a checkpoint file (bad magic)".into()));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len).map_err(|e| bad(format!("truncated header length: {e}")))?;
    let len = usize::try_from(u64::from_le_bytes(len)).map_err(|_| bad("header too large".into()))?;
    if len > 1 << 30 {
        return Err(bad(format!("implausible header length {len}")));
    }
    let mut json = vec![0u8; len];
    r.read_exact(&mut json).map_err(|e| bad(format!("truncated header: {e}")))?;
    let header: CheckpointHeader = serde_json::from_slice(&json).map_err(|e| bad(format!("bad header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(bad(format!("unsupported format version {}", header.format_version)));
    }
    let size = element_size(&header.dtype)?;
    let mut payload = Vec::new();
    r.read_to_end(&mut payload).map_err(|e| bad(format!("payload read failed: {e}")))?;
    if payload.len() % size != 0 {
        return Err(bad("payload is not a whole number of values".into()));
    }
    let values: Vec<T> = payload
        .chunks_exact(size)
        .map(|c| {
            let v = if size == 4 {
                f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes")))
            } else {
                f64::from_le_bytes(c.try_into().expect("8 bytes"))
            };
            T::from_f64(v).unwrap_or_else(T::nan)
        })
        .collect();

    let cfg = header.config;
    let mut params = Model::<T>::layout(&cfg.model)?;
    let mut adam = Adam::new(&params);
    adam.step = header.adam_step;
    let names: Vec<String> = params.iter().map(|p| p.name.clone()).collect();
    let mut seen = 0usize;
    for e in &header.tensors {
        let numel: usize = e.shape.iter().product();
        let data = values
            .get(e.offset..e.offset + numel)
            .ok_or_else(|| bad(format!("tensor `{}` runs past the payload", e.name)))?
            .to_vec();
        let t = Tensor::from_vec(&e.shape, data)?;
        let slot = |prefix: &str| e.name.strip_prefix(prefix).and_then(|n| names.iter().position(|x| x == n));
        if let Some(i) = slot("adam.m.") {
            check_shape(&e.name, adam.m[i].shape(), &e.shape)?;
            adam.m[i] = t;
        } else if let Some(i) = slot("adam.v.") {
            check_shape(&e.name, adam.v[i].shape(), &e.shape)?;
            adam.v[i] = t;
        } else if names.contains(&e.name) {
            params.set(&e.name, t).map_err(|err| bad(err.to_string()))?;
        } else {
            return Err(bad(format!("unknown tensor `{}`", e.name)));
        }
        seen += 1;
    }
    if seen != 3 * names.len() {
        return Err(bad(format!("expected {} tensors, found {seen}", 3 * names.len())));
    }
    let state = TrainState {
        model: Model {
            config: cfg.model.clone(),
            params,
        },
        adam,
        epoch: header.epoch,
        step: header.step,
        history: header.history,
    };
    Ok((cfg, state))
}

fn check_shape(name: &str, want: &[usize], got: &[usize]) -> Result<()> {
    if want != got {
        return Err(Error::Checkpoint(format!("tensor `{name}` has shape {got:?}, expected {want:?}")));
    }
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(ExperimentConfig, TrainState<T>)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&mut std::io::BufReader::new(file))
}
