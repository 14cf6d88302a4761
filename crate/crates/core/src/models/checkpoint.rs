//! Flat binary parameter storage.
//!
//! A checkpoint is a JSON manifest (written elsewhere) naming an ordered
//! list of tensors, next to a `params.bin` holding every value as
//! little-endian f64 in manifest order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

/// Writes tensors as one flat little-endian array and returns the manifest
/// describing the order.
pub fn write_params_bin(path: &Path, tensors: &[(&str, &Tensor)]) -> Result<Vec<TensorEntry>> {
    let mut bytes = Vec::new();
    let mut manifest = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        for v in t.as_slice() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        manifest.push(TensorEntry {
            name: name.to_string(),
            rows: t.rows(),
            cols: t.cols(),
        });
    }
    std::fs::write(path, bytes)?;
    Ok(manifest)
}

/// Reads tensors back in manifest order, checking the exact byte length.
pub fn read_params_bin(path: &Path, manifest: &[TensorEntry]) -> Result<Vec<Tensor>> {
    let bytes = std::fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingArtifact(path.display().to_string())
        } else {
            Error::Io(e)
        }
    })?;
    let expected: usize = manifest.iter().map(|e| e.rows * e.cols * 8).sum();
    if bytes.len() != expected {
        return Err(Error::schema(
            path.display().to_string(),
            format!("holds {} bytes, manifest expects {expected}", bytes.len()),
        ));
    }
    let mut out = Vec::with_capacity(manifest.len());
    let mut offset = 0;
    for entry in manifest {
        let count = entry.rows * entry.cols;
        let mut data = Vec::with_capacity(count);
        for _ in 0..count {
            let chunk: [u8; 8] = bytes[offset..offset + 8].try_into().expect("length checked");
            let v = f64::from_le_bytes(chunk);
            if !v.is_finite() {
                return Err(Error::schema(
                    path.display().to_string(),
                    format!("non-finite value in tensor '{}'", entry.name),
                ));
            }
            data.push(v);
            offset += 8;
        }
        out.push(Tensor::from_vec(entry.rows, entry.cols, data)?);
    }
    Ok(out)
}
