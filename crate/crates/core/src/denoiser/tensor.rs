//! Portable tensor records: name, shape and base64 of little-endian `f64`s.

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::adam::Parameters;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: String,
}

pub fn encode_f64(values: &[f64]) -> String {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    STANDARD.encode(bytes)
}

pub fn decode_f64(data: &str) -> Result<Vec<f64>> {
    let bytes = STANDARD.decode(data).map_err(|e| Error::Format(format!("bad base64 tensor: {e}")))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Format(format!("tensor byte length {} is not a multiple of 8", bytes.len())));
    }
    Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8"))).collect())
}

pub fn to_records<P: Parameters>(p: &P) -> Vec<TensorRecord> {
    p.tensors()
        .into_iter()
        .map(|(name, shape, data)| TensorRecord { name, shape, data: encode_f64(data) })
        .collect()
}

/// Overwrites the tensors of `target` from `records`, which must list the
/// same names and shapes in the same order.
pub fn load_records<P: Parameters>(target: &mut P, records: &[TensorRecord]) -> Result<()> {
    let layout: Vec<(String, Vec<usize>)> = target.tensors().into_iter().map(|(n, s, _)| (n, s)).collect();
    if layout.len() != records.len() {
        return Err(Error::Format(format!("expected {} tensors, found {}", layout.len(), records.len())));
    }
    let mut decoded = Vec::with_capacity(records.len());
    for ((name, shape), rec) in layout.iter().zip(records) {
        if *name != rec.name || *shape != rec.shape {
            return Err(Error::Format(format!(
                "tensor mismatch: expected {name} {shape:?}, found {} {:?}",
                rec.name, rec.shape
            )));
        }
        let values = decode_f64(&rec.data)?;
        if values.len() != shape.iter().product::<usize>() {
            return Err(Error::Format(format!("tensor {name} has {} values for shape {shape:?}", values.len())));
        }
        decoded.push(values);
    }
    for (dst, src) in target.tensors_mut().into_iter().zip(decoded) {
        dst.copy_from_slice(&src);
    }
    Ok(())
}
