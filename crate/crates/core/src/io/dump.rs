use serde::{Deserialize, Serialize};

use super::{push_payload, read_frame, read_payload, write_frame};
use crate::error::{Error, Result};
use crate::tensor::{AttentionStack, DType, FeatureStack};

pub const ATTENTION_MAGIC: &[u8; 8] = b"ATND0001";
pub const FEATURE_MAGIC: &[u8; 8] = b"FETD0001";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AttentionHeader {
    layers: usize,
    heads: usize,
    tokens: usize,
    dtype: DType,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FeatureHeader {
    layers: usize,
    tokens: usize,
    dim: usize,
    dtype: DType,
}

pub fn encode_attention_dump(stack: &AttentionStack) -> Result<Vec<u8>> {
    let header = AttentionHeader {
        layers: stack.layers(),
        heads: stack.heads(),
        tokens: stack.tokens(),
        dtype: stack.dtype(),
    };
    let header = serde_json::to_vec(&header).map_err(|e| Error::codec(e.to_string()))?;
    let tensor = stack.to_tensor();
    let mut out = Vec::with_capacity(12 + header.len() + tensor.len() * stack.dtype().size());
    write_frame(&mut out, ATTENTION_MAGIC, &header)?;
    push_payload(&mut out, tensor.data())?;
    Ok(out)
}

pub fn decode_attention_dump(bytes: &[u8]) -> Result<AttentionStack> {
    let (header, payload) = read_frame(bytes, ATTENTION_MAGIC)?;
    let h: AttentionHeader =
        serde_json::from_slice(header).map_err(|e| Error::codec(format!("bad header: {e}")))?;
    let count = h
        .layers
        .checked_mul(h.heads)
        .and_then(|x| x.checked_mul(h.tokens))
        .and_then(|x| x.checked_mul(h.tokens))
        .ok_or_else(|| Error::codec("header dims overflow"))?;
    if count == 0 {
        return Err(Error::codec("header has a zero dimension"));
    }
    let data = read_payload(payload, h.dtype, count)?;
    let values = match data {
        crate::tensor::TensorData::F32(v) => v.into_iter().map(|x| x as f64).collect(),
        crate::tensor::TensorData::F64(v) => v,
    };
    AttentionStack::new(h.layers, h.heads, h.tokens, h.dtype, values)
}

pub fn encode_feature_dump(stack: &FeatureStack) -> Result<Vec<u8>> {
    let header = FeatureHeader {
        layers: stack.layers(),
        tokens: stack.tokens(),
        dim: stack.dim(),
        dtype: stack.dtype(),
    };
    let header = serde_json::to_vec(&header).map_err(|e| Error::codec(e.to_string()))?;
    let tensor = stack.to_tensor();
    let mut out = Vec::with_capacity(12 + header.len() + tensor.len() * stack.dtype().size());
    write_frame(&mut out, FEATURE_MAGIC, &header)?;
    push_payload(&mut out, tensor.data())?;
    Ok(out)
}

pub fn decode_feature_dump(bytes: &[u8]) -> Result<FeatureStack> {
    let (header, payload) = read_frame(bytes, FEATURE_MAGIC)?;
    let h: FeatureHeader =
        serde_json::from_slice(header).map_err(|e| Error::codec(format!("bad header: {e}")))?;
    let count = h
        .layers
        .checked_mul(h.tokens)
        .and_then(|x| x.checked_mul(h.dim))
        .ok_or_else(|| Error::codec("header dims overflow"))?;
    if count == 0 {
        return Err(Error::codec("header has a zero dimension"));
    }
    let data = read_payload(payload, h.dtype, count)?;
    let values = match data {
        crate::tensor::TensorData::F32(v) => v.into_iter().map(|x| x as f64).collect(),
        crate::tensor::TensorData::F64(v) => v,
    };
    FeatureStack::new(h.layers, h.tokens, h.dim, h.dtype, values)
}
