// SPDX-License-Identifier: MIT OR Apache-2.0

//! Weights archive: `u64` little-endian header length, a JSON header of
//! `name -> {dtype, shape, data_offsets}`, then the raw payload.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use patchlens_core::{Model, ModelConfig, Tensor, WeightStore};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: [usize; 2],
}

/// Parses an archive held in memory.
pub fn parse_archive(bytes: &[u8], origin: &Path) -> Result<WeightStore> {
    let bad = |msg: String| Error::Format { path: origin.to_path_buf(), msg };
    let head: [u8; 8] = bytes
        .get(..8)
        .and_then(|b| b.try_into().ok())
        .ok_or_else(|| bad("shorter than the 8-byte header length".into()))?;
    let n = usize::try_from(u64::from_le_bytes(head)).map_err(|_| bad("header length overflows".into()))?;
    let header = bytes.get(8..8usize.saturating_add(n)).ok_or_else(|| bad(format!("header of {n} bytes truncated")))?;
    let payload = &bytes[8 + n..];
    let map: BTreeMap<String, Value> =
        serde_json::from_slice(header).map_err(|e| bad(format!("header is not a JSON object: {e}")))?;

    let mut store = WeightStore::new();
    for (name, v) in map {
        if name == "__metadata__" {
            continue;
        }
        let e: Entry = serde_json::from_value(v).map_err(|e| bad(format!("tensor `{name}`: {e}")))?;
        if e.dtype != "F32" {
            return Err(bad(format!("tensor `{name}` has dtype {}, only F32 is supported", e.dtype)));
        }
        let [begin, end] = e.data_offsets;
        let numel: usize = e.shape.iter().product();
        if end < begin || end - begin != numel * 4 {
            return Err(bad(format!("tensor `{name}`: offsets {begin}..{end} do not hold {numel} f32 values")));
        }
        let raw = payload.get(begin..end).ok_or_else(|| {
            bad(format!("tensor `{name}`: offsets {begin}..{end} exceed payload of {}", payload.len()))
        })?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        let t = Tensor::new(e.shape, data).map_err(|err| bad(format!("tensor `{name}`: {err}")))?;
        store.insert(name, t);
    }
    Ok(store)
}

pub fn read_archive(path: &Path) -> Result<WeightStore> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_archive(&bytes, path)
}

/// Serializes tensors in name order; the header is padded with spaces to 8 bytes.
pub fn archive_bytes<'a>(tensors: impl IntoIterator<Item = (&'a str, &'a [usize], &'a [f32])>) -> Vec<u8> {
    let mut header = BTreeMap::new();
    let mut payload = Vec::new();
    let mut sorted: Vec<_> = tensors.into_iter().collect();
    sorted.sort_by(|a, b| a.0.cmp(b.0));
    for (name, shape, data) in sorted {
        let begin = payload.len();
        for v in data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        let entry = Entry { dtype: "F32".into(), shape: shape.to_vec(), data_offsets: [begin, payload.len()] };
        header.insert(name.to_string(), entry);
    }
    let mut json = serde_json::to_vec(&header).expect("header serializes");
    while json.len() % 8 != 0 {
        json.push(b' ');
    }
    let mut out = (json.len() as u64).to_le_bytes().to_vec();
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    out
}

pub fn write_archive(path: &Path, store: &WeightStore) -> Result<()> {
    let bytes = archive_bytes(store.iter().map(|(n, t)| (n.as_str(), t.shape(), t.data())));
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads a `config.json` in the common DistilBERT key layout.
pub fn read_model_config(path: &Path) -> Result<ModelConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let v: Value = serde_json::from_str(&text).map_err(|e| Error::Format { path: path.into(), msg: e.to_string() })?;
    let base = ModelConfig::tas_b();
    let get = |key: &str, default: usize| -> Result<usize> {
        match v.get(key) {
            None => Ok(default),
            Some(x) => x.as_u64().map(|n| n as usize).ok_or_else(|| Error::Format {
                path: path.into(),
                msg: format!("`{key}` is not a non-negative integer"),
            }),
        }
    };
    Ok(ModelConfig {
        n_layers: get("n_layers", base.n_layers)?,
        n_heads: get("n_heads", base.n_heads)?,
        d_model: get("dim", base.d_model)?,
        d_ff: get("hidden_dim", base.d_ff)?,
        vocab_size: get("vocab_size", base.vocab_size)?,
        max_positions: get("max_position_embeddings", base.max_positions)?,
        ln_eps: base.ln_eps,
    })
}

/// Resolves the model configuration: an explicit file, else `config.json`
/// beside the archive, else the 6-layer TAS-B shape.
pub fn resolve_model_config(archive: &Path, explicit: Option<&Path>) -> Result<ModelConfig> {
    if let Some(p) = explicit {
        return read_model_config(p);
    }
    let sibling = archive.with_file_name("config.json");
    if sibling.is_file() {
        return read_model_config(&sibling);
    }
    Ok(ModelConfig::tas_b())
}

/// Reads and validates a model; missing or mis-shaped tensors are named in the error.
pub fn load_model(archive: &Path, config: ModelConfig) -> Result<Model> {
    let store = read_archive(archive)?;
    Ok(Model::from_weights(config, store)?)
}
