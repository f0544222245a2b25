//! Binary array files shared by dataset frames and checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! 4 bytes   magic "E2EA"
//! 4 bytes   u32 header length H
//! H bytes   UTF-8 JSON header {"shape": [rows, cols], "dtype": "f32" | "f64", ...metadata}
//! N bytes   row-major element data, little-endian IEEE-754 of the stated dtype
//! ```
//!
//! Frames are stored as `f32`; checkpoints use `f64` so that a save/load
//! round trip is bit-exact.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::Mat;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"E2EA";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayHeader {
    pub shape: [usize; 2],
    pub dtype: DType,
    #[serde(flatten)]
    pub meta: BTreeMap<String, serde_json::Value>,
}

pub fn encode(data: &Mat, dtype: DType, meta: BTreeMap<String, serde_json::Value>) -> Vec<u8> {
    let header = ArrayHeader {
        shape: [data.nrows(), data.ncols()],
        dtype,
        meta,
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(8 + header.len() + data.len() * dtype.width());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for &x in data.iter() {
        match dtype {
            DType::F32 => out.extend_from_slice(&(x as f32).to_le_bytes()),
            DType::F64 => out.extend_from_slice(&x.to_le_bytes()),
        }
    }
    out
}

pub fn decode(bytes: &[u8], origin: &str) -> Result<(ArrayHeader, Mat)> {
    let bad = |reason: &str| Error::ArrayFormat {
        path: origin.to_string(),
        reason: reason.to_string(),
    };
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(bad("bad magic"));
    }
    let hlen = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let body = bytes.get(8..8 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: ArrayHeader =
        serde_json::from_slice(body).map_err(|e| bad(&format!("header: {e}")))?;
    let [rows, cols] = header.shape;
    let width = header.dtype.width();
    let data = &bytes[8 + hlen..];
    if data.len() != rows * cols * width {
        return Err(bad(&format!(
            "expected {} data bytes, found {}",
            rows * cols * width,
            data.len()
        )));
    }
    let values: Vec<f64> = match header.dtype {
        DType::F32 => data
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        DType::F64 => data
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    };
    let mat = Mat::from_shape_vec((rows, cols), values).map_err(|e| bad(&e.to_string()))?;
    Ok((header, mat))
}

pub fn write(
    path: &Path,
    data: &Mat,
    dtype: DType,
    meta: BTreeMap<String, serde_json::Value>,
) -> Result<String> {
    let bytes = encode(data, dtype, meta);
    fs::write(path, &bytes)?;
    Ok(sha256_hex(&bytes))
}

pub fn read(path: &Path) -> Result<(ArrayHeader, Mat)> {
    let bytes = fs::read(path)?;
    decode(&bytes, &path.display().to_string())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
