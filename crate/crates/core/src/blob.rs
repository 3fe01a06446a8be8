//! Little-endian binary array blobs referenced from JSON manifests.
//!
//! Every blob is recorded with its dtype, logical shape, byte length and
//! SHA-256 digest so readers can reject truncated or edited files.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F64,
    U32,
}

impl DType {
    fn width(self) -> usize {
        match self {
            DType::F64 => 8,
            DType::U32 => 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlobEntry {
    pub file: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub bytes: u64,
    pub sha256: String,
}

impl BlobEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write_bytes(dir: &Path, file: &str, dtype: DType, shape: &[usize], bytes: Vec<u8>) -> Result<BlobEntry> {
    let path = dir.join(file);
    fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
    Ok(BlobEntry {
        file: file.to_string(),
        dtype,
        shape: shape.to_vec(),
        bytes: bytes.len() as u64,
        sha256: sha256_hex(&bytes),
    })
}

pub fn write_f64(dir: &Path, file: &str, data: &[f64], shape: &[usize]) -> Result<BlobEntry> {
    check_shape(file, data.len(), shape)?;
    let bytes = data.iter().flat_map(|v| v.to_le_bytes()).collect();
    write_bytes(dir, file, DType::F64, shape, bytes)
}

pub fn write_u32(dir: &Path, file: &str, data: &[u32], shape: &[usize]) -> Result<BlobEntry> {
    check_shape(file, data.len(), shape)?;
    let bytes = data.iter().flat_map(|v| v.to_le_bytes()).collect();
    write_bytes(dir, file, DType::U32, shape, bytes)
}

fn check_shape(file: &str, len: usize, shape: &[usize]) -> Result<()> {
    let expected: usize = shape.iter().product();
    if expected != len {
        return Err(Error::Shape(format!(
            "blob `{file}` has {len} elements but shape {shape:?}"
        )));
    }
    Ok(())
}

fn read_verified(dir: &Path, entry: &BlobEntry, dtype: DType) -> Result<Vec<u8>> {
    if entry.dtype != dtype {
        return Err(Error::InvalidAsset(format!(
            "blob `{}` has dtype {:?}, expected {:?}",
            entry.file, entry.dtype, dtype
        )));
    }
    let path = dir.join(&entry.file);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    if bytes.len() as u64 != entry.bytes || bytes.len() != entry.len() * dtype.width() {
        return Err(Error::Shape(format!(
            "blob `{}` is {} bytes, manifest records {} bytes for shape {:?}",
            entry.file,
            bytes.len(),
            entry.bytes,
            entry.shape
        )));
    }
    if sha256_hex(&bytes) != entry.sha256 {
        return Err(Error::Checksum(entry.file.clone()));
    }
    Ok(bytes)
}

pub fn read_f64(dir: &Path, entry: &BlobEntry) -> Result<Vec<f64>> {
    let bytes = read_verified(dir, entry, DType::F64)?;
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

pub fn read_u32(dir: &Path, entry: &BlobEntry) -> Result<Vec<u32>> {
    let bytes = read_verified(dir, entry, DType::U32)?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("chunk of 4")))
        .collect())
}

/// Serializes `value` as pretty JSON into `path`.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Manifest {
        path: path.to_path_buf(),
        source: e,
    })?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Manifest {
        path: path.to_path_buf(),
        source: e,
    })
}
