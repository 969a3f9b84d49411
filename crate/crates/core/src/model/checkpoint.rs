//! Binary checkpoint format.
//!
//! ```text
//! "ELM1"                      4 bytes
//! header length               u64 little-endian
//! header                      UTF-8 JSON (CheckpointHeader)
//! tensors                     f64 little-endian, row-major, in the order
//!                             listed by `header.tensors` (= Params::tensors)
//! ```

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ElmmError, Result};
use crate::model::{Model, ModelConfig, Params};
use crate::numerics::{Matrix, SeededRng};

pub const MAGIC: &[u8; 4] = b"ELM1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: ModelConfig,
    pub pruned_layers: Vec<usize>,
    pub compensated_layers: Vec<usize>,
    pub freeze_compensation: bool,
    pub tensors: Vec<TensorEntry>,
}

pub fn to_bytes(model: &Model) -> Result<Vec<u8>> {
    let tensors = model.params.tensors();
    let header = CheckpointHeader {
        config: model.config.clone(),
        pruned_layers: model.pruned_layers(),
        compensated_layers: (0..model.params.layers.len())
            .filter(|&l| model.params.layers[l].compensation.is_some())
            .collect(),
        freeze_compensation: model.freeze_compensation,
        tensors: tensors
            .iter()
            .map(|(name, m)| TensorEntry {
                name: name.clone(),
                rows: m.rows(),
                cols: m.cols(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(12 + json.len() + 8 * model.params.num_values());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, m) in tensors {
        for v in m.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
    let fmt = |m: &str| ElmmError::Format(format!("checkpoint: {m}"));
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(fmt("bad magic"));
    }
    let hlen = u64::from_le_bytes(bytes[4..12].try_into().expect("8 bytes")) as usize;
    let body = bytes
        .get(12..12 + hlen)
        .ok_or_else(|| fmt("truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(body)?;
    header.config.validate()?;

    // Rebuild the parameter skeleton, then overwrite it tensor by tensor.
    let mut params = Params::init(&header.config, &mut SeededRng::new(0));
    for &l in &header.pruned_layers {
        let lp = params
            .layers
            .get_mut(l)
            .ok_or_else(|| fmt("pruned layer out of range"))?;
        lp.pruned = true;
    }
    let d = header.config.d_model;
    for &l in &header.compensated_layers {
        let lp = params
            .layers
            .get_mut(l)
            .ok_or_else(|| fmt("compensated layer out of range"))?;
        lp.compensation = Some(Matrix::zeros(d, d));
    }
    let mut offset = 12 + hlen;
    let slots = params.tensors_mut();
    if slots.len() != header.tensors.len() {
        return Err(fmt("tensor count mismatch"));
    }
    for ((name, slot), entry) in slots.into_iter().zip(&header.tensors) {
        if name != entry.name || slot.shape() != (entry.rows, entry.cols) {
            return Err(fmt(&format!(
                "tensor {} ({}x{}) does not match expected {name} {:?}",
                entry.name,
                entry.rows,
                entry.cols,
                slot.shape()
            )));
        }
        let n = entry.rows * entry.cols;
        let raw = bytes
            .get(offset..offset + 8 * n)
            .ok_or_else(|| ElmmError::DimensionMismatch {
                what: format!("checkpoint tensor {name}"),
                expected: offset + 8 * n,
                found: bytes.len(),
            })?;
        for (dst, chunk) in slot.data_mut().iter_mut().zip(raw.chunks_exact(8)) {
            *dst = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
        }
        offset += 8 * n;
    }
    if offset != bytes.len() {
        return Err(ElmmError::DimensionMismatch {
            what: "checkpoint".into(),
            expected: offset,
            found: bytes.len(),
        });
    }
    Ok(Model {
        config: header.config,
        params,
        freeze_compensation: header.freeze_compensation,
    })
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    let bytes = to_bytes(model)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Model> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    from_bytes(&bytes)
}
