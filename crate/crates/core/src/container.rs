//! On-disk container: a directory of little-endian row-major flat binaries
//! (`f32`, or `u8` for masks and flags) described by a JSON manifest.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Entry describing one flat binary in a manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub file: String,
    pub dtype: String,
    pub shape: Vec<usize>,
}

impl TensorEntry {
    pub fn f32(name: &str, shape: Vec<usize>) -> Self {
        Self { name: name.into(), file: format!("{name}.f32"), dtype: "f32".into(), shape }
    }

    pub fn u8(name: &str, shape: Vec<usize>) -> Self {
        Self { name: name.into(), file: format!("{name}.u8"), dtype: "u8".into(), shape }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

pub fn write_f32(path: &Path, values: &[f32]) -> Result<()> {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_f32(path: &Path, expected: usize) -> Result<Vec<f32>> {
    let bytes = fs::read(path)?;
    if bytes.len() != expected * 4 {
        return Err(Error::Container {
            path: path.to_path_buf(),
            detail: format!("expected {} bytes, found {}", expected * 4, bytes.len()),
        });
    }
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

pub fn write_u8(path: &Path, values: &[u8]) -> Result<()> {
    fs::write(path, values)?;
    Ok(())
}

pub fn read_u8(path: &Path, expected: usize) -> Result<Vec<u8>> {
    let bytes = fs::read(path)?;
    if bytes.len() != expected {
        return Err(Error::Container {
            path: path.to_path_buf(),
            detail: format!("expected {expected} bytes, found {}", bytes.len()),
        });
    }
    Ok(bytes)
}

/// Pretty JSON with a trailing newline; field order follows the struct.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = fs::File::create(path)?;
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::Container {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    Ok(serde_json::from_str(&text)?)
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Container { path: dir.to_path_buf(), detail: e.to_string() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f32_is_little_endian_row_major() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.f32");
        write_f32(&p, &[1.0, -2.5]).unwrap();
        let raw = fs::read(&p).unwrap();
        assert_eq!(&raw[..4], &1.0f32.to_le_bytes());
        assert_eq!(read_f32(&p, 2).unwrap(), vec![1.0, -2.5]);
        assert!(read_f32(&p, 3).is_err());
    }
}
