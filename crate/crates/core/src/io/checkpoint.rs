use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use super::{push_payload, read_frame, read_payload, write_frame};
use crate::error::{Error, Result};
use crate::tensor::{DType, Tensor};

const CHECKPOINT_MAGIC: &[u8; 8] = b"CKPT0001";

/// Header entry for one stored tensor. `offset` is relative to the payload start.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
    pub offset: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    config: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// Decoded checkpoint: free-form configuration plus named tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: serde_json::Value,
    pub params: BTreeMap<String, Tensor>,
}

/// Encodes named tensors sorted by name, so equal inputs give equal bytes.
pub fn encode_checkpoint<'a, I>(params: I, config: &serde_json::Value) -> Result<Vec<u8>>
where
    I: IntoIterator<Item = (&'a str, &'a Tensor)>,
{
    let mut sorted: Vec<(&str, &Tensor)> = params.into_iter().collect();
    sorted.sort_by(|a, b| a.0.cmp(b.0));
    for pair in sorted.windows(2) {
        if pair[0].0 == pair[1].0 {
            return Err(Error::codec(format!(
                "duplicate tensor name `{}`",
                pair[0].0
            )));
        }
    }

    let mut entries = Vec::with_capacity(sorted.len());
    let mut offset = 0usize;
    for (name, t) in &sorted {
        if !t.is_finite() {
            return Err(Error::codec(format!(
                "tensor `{name}` has non-finite values"
            )));
        }
        entries.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            dtype: t.dtype(),
            offset,
        });
        offset += t.len() * t.dtype().size();
    }
    let header = CheckpointHeader {
        config: config.clone(),
        tensors: entries,
    };
    let header = serde_json::to_vec(&header).map_err(|e| Error::codec(e.to_string()))?;

    let mut out = Vec::with_capacity(12 + header.len() + offset);
    write_frame(&mut out, CHECKPOINT_MAGIC, &header)?;
    for (_, t) in &sorted {
        push_payload(&mut out, t.data())?;
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let (header, payload) = read_frame(bytes, CHECKPOINT_MAGIC)?;
    let h: CheckpointHeader =
        serde_json::from_slice(header).map_err(|e| Error::codec(format!("bad header: {e}")))?;

    let mut seen = HashSet::new();
    let mut params = BTreeMap::new();
    let mut cursor = 0usize;
    for entry in h.tensors {
        if !seen.insert(entry.name.clone()) {
            return Err(Error::codec(format!(
                "duplicate tensor name `{}`",
                entry.name
            )));
        }
        if entry.offset != cursor {
            return Err(Error::codec(format!(
                "tensor `{}` starts at {}, expected {cursor}",
                entry.name, entry.offset
            )));
        }
        let count = entry
            .shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::codec("shape overflow"))?;
        let nbytes = count * entry.dtype.size();
        let end = cursor
            .checked_add(nbytes)
            .filter(|&e| e <= payload.len())
            .ok_or_else(|| Error::codec(format!("truncated stream in tensor `{}`", entry.name)))?;
        let data = read_payload(&payload[cursor..end], entry.dtype, count)?;
        let tensor = Tensor::new(entry.shape, data).map_err(|e| Error::codec(e.to_string()))?;
        params.insert(entry.name, tensor);
        cursor = end;
    }
    if cursor != payload.len() {
        return Err(Error::codec(format!(
            "{} trailing payload bytes",
            payload.len() - cursor
        )));
    }
    Ok(Checkpoint {
        config: h.config,
        params,
    })
}
