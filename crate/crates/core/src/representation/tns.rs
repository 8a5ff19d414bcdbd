//! `TNS1` tensor files: one JSON header line `{"shape":[...],"dtype":"f32"}`
//! followed by the row-major little-endian `f32` payload.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
struct Header {
    shape: Vec<usize>,
    dtype: String,
}

pub fn encode(t: &Tensor) -> Vec<u8> {
    let header = Header {
        shape: t.shape().to_vec(),
        dtype: "f32".into(),
    };
    let mut out = serde_json::to_vec(&header).expect("header serializes");
    out.push(b'\n');
    out.reserve(t.len() * 4);
    for v in t.data() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::format("TNS1: missing header line"))?;
    let header: Header =
        serde_json::from_slice(&bytes[..nl]).map_err(|e| Error::format(format!("TNS1 header: {e}")))?;
    if header.dtype != "f32" {
        return Err(Error::format(format!("TNS1: unsupported dtype {:?}", header.dtype)));
    }
    let payload = &bytes[nl + 1..];
    let n: usize = header.shape.iter().product();
    if payload.len() != n * 4 {
        return Err(Error::format(format!(
            "TNS1: shape {:?} needs {} payload bytes, got {}",
            header.shape,
            n * 4,
            payload.len()
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Tensor::new(header.shape, data).map_err(|e| Error::format(format!("TNS1: {e}")))
}
