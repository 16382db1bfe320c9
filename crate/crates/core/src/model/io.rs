//! CRML weight container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "CRML" | version: u32 | header_len: u32 | header: UTF-8 JSON | tensor data
//! ```
//!
//! The header holds the model config and an ordered tensor directory
//! (name, rows, cols, byte offset into the data section). Tensor data is raw
//! `f32`, row-major, in directory order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::Matrix;

use super::{ModelBundle, ModelConfig};

pub const CRML_MAGIC: &[u8; 4] = b"CRML";
pub const CRML_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

pub fn write_crml<W: Write>(model: &ModelBundle, mut w: W) -> Result<()> {
    let mut offset = 0u64;
    let tensors = model
        .tensors()
        .into_iter()
        .map(|(name, t)| {
            let e = TensorEntry {
                name,
                rows: t.rows(),
                cols: t.cols(),
                offset,
            };
            offset += (t.data().len() * 4) as u64;
            e
        })
        .collect();
    let header = serde_json::to_vec(&Header {
        config: model.config.clone(),
        tensors,
    })?;
    w.write_all(CRML_MAGIC)?;
    w.write_all(&CRML_VERSION.to_le_bytes())?;
    w.write_all(&(header.len() as u32).to_le_bytes())?;
    w.write_all(&header)?;
    for (_, t) in model.tensors() {
        let mut buf = Vec::with_capacity(t.data().len() * 4);
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_crml<R: Read>(mut r: R) -> Result<ModelBundle> {
    let mut word = [0u8; 4];
    r.read_exact(&mut word)?;
    if &word != CRML_MAGIC {
        return Err(Error::Format("not a CRML file (bad magic)".into()));
    }
    r.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != CRML_VERSION {
        return Err(Error::Format(format!("unsupported CRML version {version}")));
    }
    r.read_exact(&mut word)?;
    let mut header = vec![0u8; u32::from_le_bytes(word) as usize];
    r.read_exact(&mut header)?;
    let header: Header = serde_json::from_slice(&header)?;
    let mut data = Vec::new();
    r.read_to_end(&mut data)?;

    let expected = ModelBundle::directory(&header.config);
    if expected.len() != header.tensors.len() {
        return Err(Error::Format("tensor directory does not match config".into()));
    }
    let mut tensors = Vec::with_capacity(expected.len());
    for ((name, rows, cols), e) in expected.iter().zip(&header.tensors) {
        if &e.name != name || e.rows != *rows || e.cols != *cols {
            return Err(Error::Format(format!(
                "directory entry {} ({}x{}) where {name} ({rows}x{cols}) expected",
                e.name, e.rows, e.cols
            )));
        }
        let start = e.offset as usize;
        let end = start + rows * cols * 4;
        let bytes = data
            .get(start..end)
            .ok_or_else(|| Error::Format(format!("{name}: data section truncated")))?;
        let values = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tensors.push(Matrix::from_vec(*rows, *cols, values)?);
    }
    ModelBundle::from_tensors(header.config, tensors)
}

pub fn save_crml(model: &ModelBundle, path: impl AsRef<Path>) -> Result<()> {
    write_crml(model, BufWriter::new(File::create(path)?))
}

pub fn load_crml(path: impl AsRef<Path>) -> Result<ModelBundle> {
    read_crml(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::seeded_random_model;

    #[test]
    fn roundtrip_is_exact() {
        let cfg = ModelConfig::byte_level(2, 2, 8, 16, 32);
        let m = seeded_random_model(&cfg, 3).unwrap();
        let mut buf = Vec::new();
        write_crml(&m, &mut buf).unwrap();
        assert_eq!(&buf[..4], CRML_MAGIC);
        let back = read_crml(buf.as_slice()).unwrap();
        assert_eq!(back, m);
        let mut again = Vec::new();
        write_crml(&back, &mut again).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let cfg = ModelConfig::byte_level(1, 1, 4, 4, 8);
        let m = seeded_random_model(&cfg, 0).unwrap();
        let mut buf = Vec::new();
        write_crml(&m, &mut buf).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_crml(bad.as_slice()), Err(Error::Format(_))));
        buf.truncate(buf.len() - 4);
        assert!(matches!(read_crml(buf.as_slice()), Err(Error::Format(_))));
    }
}
