//! Named-tensor container shared by checkpoints and KV-cache artifacts.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes   b"GQATENS\0"
//! version    u32
//! header_len u64
//! checksum   u64       FNV-1a over the header bytes
//! header     JSON      kind, metadata, tensor table (name, dtype, shape, offset, length)
//! data       raw f64   tensors in header order, offsets relative to data start
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub const MAGIC: &[u8; 8] = b"GQATENS\0";
pub const VERSION: u32 = 1;
const PREAMBLE: usize = 8 + 4 + 8 + 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: [usize; 2],
    pub offset: usize,
    pub length: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub kind: String,
    pub metadata: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorFile {
    pub kind: String,
    pub metadata: serde_json::Value,
    pub tensors: Vec<(String, Matrix)>,
}

impl TensorFile {
    pub fn get(&self, name: &str) -> Result<&Matrix> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, m)| m)
            .ok_or_else(|| Error::CorruptHeader(format!("missing tensor {name}")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0;
        let entries = self
            .tensors
            .iter()
            .map(|(name, m)| {
                let length = m.data().len() * 8;
                let e = TensorEntry {
                    name: name.clone(),
                    dtype: "f64".into(),
                    shape: [m.rows(), m.cols()],
                    offset,
                    length,
                };
                offset += length;
                e
            })
            .collect();
        let header = Header {
            kind: self.kind.clone(),
            metadata: self.metadata.clone(),
            tensors: entries,
        };
        let header_bytes = serde_json::to_vec(&header)
            .map_err(|e| Error::CorruptHeader(format!("cannot encode header: {e}")))?;
        let mut out = Vec::with_capacity(PREAMBLE + header_bytes.len() + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
        out.extend_from_slice(&fnv1a(&header_bytes).to_le_bytes());
        out.extend_from_slice(&header_bytes);
        for (_, m) in &self.tensors {
            for v in m.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..8] != MAGIC {
            return Err(Error::BadMagic {
                path: path.to_path_buf(),
            });
        }
        if bytes.len() < PREAMBLE {
            return Err(Error::Truncated("file ends inside the preamble".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(Error::UnsupportedVersion {
                found: version,
                expected: VERSION,
            });
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let checksum = u64::from_le_bytes(bytes[20..28].try_into().unwrap());
        let header_end = PREAMBLE
            .checked_add(header_len)
            .ok_or_else(|| Error::CorruptHeader("header length overflows".into()))?;
        if bytes.len() < header_end {
            return Err(Error::Truncated(format!(
                "header needs {header_len} bytes, file has {}",
                bytes.len() - PREAMBLE
            )));
        }
        let header_bytes = &bytes[PREAMBLE..header_end];
        if fnv1a(header_bytes) != checksum {
            return Err(Error::CorruptHeader("header checksum mismatch".into()));
        }
        let header: Header = serde_json::from_slice(header_bytes)
            .map_err(|e| Error::CorruptHeader(format!("unreadable header: {e}")))?;
        let data = &bytes[header_end..];

        let mut expected_offset = 0;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in &header.tensors {
            if e.dtype != "f64" {
                return Err(Error::CorruptHeader(format!(
                    "tensor {} has unsupported dtype {}",
                    e.name, e.dtype
                )));
            }
            if e.offset != expected_offset {
                return Err(Error::CorruptHeader(format!(
                    "tensor {} at offset {}, expected {expected_offset}",
                    e.name, e.offset
                )));
            }
            let count = e.shape[0].checked_mul(e.shape[1]).unwrap_or(usize::MAX);
            if count.checked_mul(8) != Some(e.length) {
                return Err(Error::Shape(format!(
                    "tensor {} shape {:?} does not match {} bytes",
                    e.name, e.shape, e.length
                )));
            }
            let end = e.offset + e.length;
            if end > data.len() {
                return Err(Error::Truncated(format!(
                    "tensor {} needs bytes {}..{end}, data has {}",
                    e.name,
                    e.offset,
                    data.len()
                )));
            }
            let values = data[e.offset..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push((e.name.clone(), Matrix::new(e.shape[0], e.shape[1], values)?));
            expected_offset = end;
        }
        if expected_offset != data.len() {
            return Err(Error::CorruptHeader(format!(
                "{} trailing bytes after the last tensor",
                data.len() - expected_offset
            )));
        }
        Ok(Self {
            kind: header.kind,
            metadata: header.metadata,
            tensors,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Reads and checks the container kind.
    pub fn read_kind(path: &Path, kind: &str) -> Result<Self> {
        let f = Self::read(path)?;
        if f.kind != kind {
            return Err(Error::CorruptHeader(format!(
                "{} holds a {} artifact, expected {kind}",
                path.display(),
                f.kind
            )));
        }
        Ok(f)
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> TensorFile {
        TensorFile {
            kind: "test".into(),
            metadata: serde_json::json!({"answer": 42}),
            tensors: vec![
                ("a".into(), Matrix::from_fn(2, 3, |r, c| (r * 3 + c) as f64 + 0.1)),
                ("b".into(), Matrix::from_fn(1, 1, |_, _| -0.0)),
            ],
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let f = sample();
        let bytes = f.to_bytes().unwrap();
        let g = TensorFile::from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(g.to_bytes().unwrap(), bytes);
        assert_eq!(g.get("b").unwrap().data()[0].to_bits(), (-0.0f64).to_bits());
    }

    #[test]
    fn corruption_is_diagnosed() {
        let bytes = sample().to_bytes().unwrap();
        let p = Path::new("mem");

        let mut bad = bytes.clone();
        bad[0] ^= 1;
        assert!(matches!(TensorFile::from_bytes(&bad, p), Err(Error::BadMagic { .. })));

        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(matches!(
            TensorFile::from_bytes(&bad, p),
            Err(Error::UnsupportedVersion { found: 9, .. })
        ));

        let mut bad = bytes.clone();
        bad[PREAMBLE + 3] ^= 0x20;
        assert!(matches!(TensorFile::from_bytes(&bad, p), Err(Error::CorruptHeader(_))));

        let cut = &bytes[..bytes.len() - 4];
        assert!(matches!(TensorFile::from_bytes(cut, p), Err(Error::Truncated(_))));
    }
}
