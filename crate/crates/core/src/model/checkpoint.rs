//! Binary checkpoint: magic, little-endian u32 version, u64 header length,
//! a JSON header (config, dtype, parameter names and shapes), then raw
//! little-endian parameter blocks in declaration order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelError, ModelState, TransformerConfig};
use crate::numerics::{Real, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MNMTCKPT";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: TransformerConfig,
    dtype: String,
    params: Vec<ParamEntry>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ModelError + '_ {
    move |source| ModelError::Io { path: path.display().to_string(), source }
}

pub fn save_checkpoint<T: Real>(state: &ModelState<T>, path: &Path) -> Result<(), ModelError> {
    let header = Header {
        config: state.config().clone(),
        dtype: T::DTYPE.to_string(),
        params: state
            .param_names()
            .iter()
            .zip(state.params())
            .map(|(n, p)| ParamEntry { name: n.clone(), shape: p.shape().to_vec() })
            .collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| ModelError::BadCheckpoint(e.to_string()))?;
    let mut out = Vec::with_capacity(json.len() + 20 + state.parameter_count() * T::BYTES);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for p in state.params() {
        for &x in p.data() {
            x.write_le(&mut out);
        }
    }
    fs::write(path, out).map_err(io_err(path))
}

fn take<'a>(bytes: &mut &'a [u8], n: usize) -> Result<&'a [u8], ModelError> {
    if bytes.len() < n {
        return Err(ModelError::BadCheckpoint("truncated file".into()));
    }
    let (head, rest) = bytes.split_at(n);
    *bytes = rest;
    Ok(head)
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<ModelState<T>, ModelError> {
    let data = fs::read(path).map_err(io_err(path))?;
    let mut rest = data.as_slice();
    if take(&mut rest, 8)? != CHECKPOINT_MAGIC {
        return Err(ModelError::BadCheckpoint("missing magic bytes".into()));
    }
    let version = u32::from_le_bytes(take(&mut rest, 4)?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(ModelError::BadCheckpoint(format!("unsupported version {version}")));
    }
    let len = u64::from_le_bytes(take(&mut rest, 8)?.try_into().expect("8 bytes")) as usize;
    let header: Header =
        serde_json::from_slice(take(&mut rest, len)?).map_err(|e| ModelError::BadCheckpoint(e.to_string()))?;
    if header.dtype != T::DTYPE {
        return Err(ModelError::BadCheckpoint(format!("stored dtype {} but {} requested", header.dtype, T::DTYPE)));
    }
    header.config.validate()?;
    let skeleton = ModelState::<T>::from_params(header.config.clone(), Vec::new());
    if skeleton.layout.names.len() != header.params.len() {
        return Err(ModelError::BadCheckpoint("parameter list does not match config".into()));
    }
    let mut params = Vec::with_capacity(header.params.len());
    for (entry, (name, shape)) in header.params.iter().zip(skeleton.layout.names.iter().zip(&skeleton.layout.shapes)) {
        if &entry.name != name || &entry.shape != shape {
            return Err(ModelError::BadCheckpoint(format!(
                "parameter {} {:?} does not match expected {} {:?}",
                entry.name, entry.shape, name, shape
            )));
        }
        let n: usize = shape.iter().product();
        let block = take(&mut rest, n * T::BYTES)?;
        let values = block.chunks_exact(T::BYTES).map(T::read_le).collect();
        params.push(Tensor::new(shape.clone(), values)?);
    }
    if !rest.is_empty() {
        return Err(ModelError::BadCheckpoint(format!("{} trailing bytes", rest.len())));
    }
    Ok(ModelState::from_params(header.config, params))
}

/// Loads parameters into an existing model; the stored config must match.
pub fn load_checkpoint_into<T: Real>(state: &mut ModelState<T>, path: &Path) -> Result<(), ModelError> {
    let loaded = load_checkpoint::<T>(path)?;
    if loaded.config() != state.config() {
        return Err(ModelError::ConfigMismatch(format!(
            "checkpoint has {}+{} layers, d_model {}, vocab {}; model has {}+{} layers, d_model {}, vocab {}",
            loaded.config().enc_layers,
            loaded.config().dec_layers,
            loaded.config().d_model,
            loaded.config().vocab_size,
            state.config().enc_layers,
            state.config().dec_layers,
            state.config().d_model,
            state.config().vocab_size,
        )));
    }
    *state = loaded;
    Ok(())
}
