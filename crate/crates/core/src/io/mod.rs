//! File codecs: attention/feature dumps, checkpoints and corpus manifests.
//!
//! Binary formats share one layout: an 8-byte ASCII magic, a little-endian
//! `u32` header length, a JSON header, then the raw little-endian row-major
//! payload.

mod checkpoint;
mod dump;
mod manifest;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, Checkpoint, TensorEntry};
pub use dump::{
    decode_attention_dump, decode_feature_dump, encode_attention_dump, encode_feature_dump,
    ATTENTION_MAGIC, FEATURE_MAGIC,
};
pub use manifest::{
    parse_manifest, write_manifest, CorpusManifest, ImageRecord, Modality, Provenance,
};

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{DType, TensorData};

pub(crate) const HEADER_LIMIT: usize = 1 << 26;

/// Writes `bytes` to a sibling temporary file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let name = path
        .file_name()
        .ok_or_else(|| Error::config(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(
        ".{}.tmp{}",
        name.to_string_lossy(),
        std::process::id()
    ));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub(crate) fn write_frame(out: &mut Vec<u8>, magic: &[u8; 8], header: &[u8]) -> Result<()> {
    let len = u32::try_from(header.len()).map_err(|_| Error::codec("header too large"))?;
    out.extend_from_slice(magic);
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(header);
    Ok(())
}

/// Splits a framed byte stream into `(header, payload)` after checking the magic.
pub(crate) fn read_frame<'a>(bytes: &'a [u8], magic: &[u8; 8]) -> Result<(&'a [u8], &'a [u8])> {
    if bytes.len() < 12 {
        return Err(Error::codec(
            "truncated stream: missing magic or header length",
        ));
    }
    if &bytes[..8] != magic {
        return Err(Error::codec("bad magic"));
    }
    let len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    if len > HEADER_LIMIT || bytes.len() < 12 + len {
        return Err(Error::codec(
            "truncated stream: header shorter than declared",
        ));
    }
    Ok((&bytes[12..12 + len], &bytes[12 + len..]))
}

pub(crate) fn push_payload(out: &mut Vec<u8>, data: &TensorData) -> Result<()> {
    match data {
        TensorData::F32(v) => {
            for x in v {
                if !x.is_finite() {
                    return Err(Error::codec("non-finite value in payload"));
                }
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        TensorData::F64(v) => {
            for x in v {
                if !x.is_finite() {
                    return Err(Error::codec("non-finite value in payload"));
                }
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    Ok(())
}

pub(crate) fn read_payload(bytes: &[u8], dtype: DType, count: usize) -> Result<TensorData> {
    let expected = count
        .checked_mul(dtype.size())
        .ok_or_else(|| Error::codec("payload size overflow"))?;
    if bytes.len() != expected {
        return Err(Error::codec(format!(
            "payload is {} bytes, header implies {expected}",
            bytes.len()
        )));
    }
    let data = match dtype {
        DType::F32 => TensorData::F32(
            bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect(),
        ),
        DType::F64 => TensorData::F64(
            bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
        ),
    };
    let finite = match &data {
        TensorData::F32(v) => v.iter().all(|x| x.is_finite()),
        TensorData::F64(v) => v.iter().all(|x| x.is_finite()),
    };
    if !finite {
        return Err(Error::codec("non-finite value in payload"));
    }
    Ok(data)
}
