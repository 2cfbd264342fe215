//! Model file format: an 8-byte little-endian header length, a JSON header
//! describing the architecture, then the parameters as little-endian `f64`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor_nn::{Architecture, ModelParams};

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    architecture: Architecture,
    len: usize,
}

const FORMAT: &str = "pmfl-model-f64le-v1";

pub fn encode_model(model: &ModelParams) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&Header {
        format: FORMAT.to_string(),
        architecture: model.architecture().clone(),
        len: model.len(),
    })?;
    let mut out = Vec::with_capacity(8 + header.len() + 8 * model.len());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for v in model.as_flat() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_model(bytes: &[u8]) -> Result<ModelParams> {
    let truncated = || Error::invalid("model file is truncated");
    let len_bytes: [u8; 8] = bytes.get(..8).ok_or_else(truncated)?.try_into().expect("8 bytes");
    let hlen = usize::try_from(u64::from_le_bytes(len_bytes)).map_err(|_| truncated())?;
    let header_end = 8usize.checked_add(hlen).ok_or_else(truncated)?;
    let header: Header = serde_json::from_slice(bytes.get(8..header_end).ok_or_else(truncated)?)?;
    if header.format != FORMAT {
        return Err(Error::invalid(format!("unknown model format `{}`", header.format)));
    }
    let body = &bytes[header_end..];
    if body.len() != header.len * 8 {
        return Err(Error::invalid(format!(
            "model body holds {} bytes, header promises {} values",
            body.len(),
            header.len
        )));
    }
    let values = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    ModelParams::from_flat(&header.architecture, values)
}

pub fn save_model(path: &Path, model: &ModelParams) -> Result<()> {
    fs::write(path, encode_model(model)?).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<ModelParams> {
    decode_model(&fs::read(path).map_err(|e| Error::io(path, e))?)
}
