//! Named-tensor archive, the checkpoint format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "IBQA" | version u32 | entry count u32
//! per entry: name_len u32 | name utf-8 | rank u32 | dims u32[rank]
//!            | dtype u8 (0 = f32, 1 = f64) | payload (row-major LE)
//! ```
//!
//! Entries keep insertion order, names are unique, and loading validates
//! magic, version, dtype tags and payload sizes before any entry is exposed,
//! so a corrupt file never yields partial state.

use crate::error::{Error, Result};
use crate::tensor::{Dtype, Scalar, Tensor};
use std::path::Path;

const MAGIC: &[u8; 4] = b"IBQA";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum ArchiveTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl ArchiveTensor {
    fn dtype(&self) -> Dtype {
        match self {
            ArchiveTensor::F32(_) => Dtype::F32,
            ArchiveTensor::F64(_) => Dtype::F64,
        }
    }

    fn shape(&self) -> &[usize] {
        match self {
            ArchiveTensor::F32(t) => t.shape(),
            ArchiveTensor::F64(t) => t.shape(),
        }
    }
}

#[derive(Debug, Default, Clone, PartialEq)]
pub struct TensorArchive {
    entries: Vec<(String, ArchiveTensor)>,
}

impl TensorArchive {
    pub fn new() -> Self {
        TensorArchive::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn push_f32(&mut self, name: &str, tensor: Tensor<f32>) {
        self.push(name, ArchiveTensor::F32(tensor));
    }

    pub fn push_f64(&mut self, name: &str, tensor: Tensor<f64>) {
        self.push(name, ArchiveTensor::F64(tensor));
    }

    fn push(&mut self, name: &str, tensor: ArchiveTensor) {
        assert!(
            !self.entries.iter().any(|(n, _)| n == name),
            "duplicate archive entry '{name}'"
        );
        self.entries.push((name.to_string(), tensor));
    }

    /// Store a u64 counter as a 1-element f64 tensor (exact below 2^53).
    pub fn push_u64(&mut self, name: &str, value: u64) {
        debug_assert!(value < (1 << 53));
        self.push_f64(name, Tensor::scalar(value as f64));
    }

    pub fn get(&self, name: &str) -> Result<&ArchiveTensor> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Format(format!("archive entry '{name}' missing")))
    }

    pub fn get_f32(&self, name: &str) -> Result<&Tensor<f32>> {
        match self.get(name)? {
            ArchiveTensor::F32(t) => Ok(t),
            other => Err(Error::Format(format!(
                "archive entry '{name}' has dtype {:?}, expected f32",
                other.dtype()
            ))),
        }
    }

    pub fn get_u64(&self, name: &str) -> Result<u64> {
        match self.get(name)? {
            ArchiveTensor::F64(t) if t.numel() == 1 => Ok(t.item() as u64),
            _ => Err(Error::Format(format!("archive entry '{name}' is not a counter"))),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, tensor) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let shape = tensor.shape();
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &d in shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            out.push(tensor.dtype().tag());
            match tensor {
                ArchiveTensor::F32(t) => {
                    for &v in t.data() {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                ArchiveTensor::F64(t) => {
                    for &v in t.data() {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cursor = Cursor { bytes, pos: 0 };
        let magic = cursor.take(4)?;
        if magic != MAGIC {
            return Err(Error::Format(format!(
                "bad archive magic {:?}, expected {:?}",
                &magic[..],
                MAGIC
            )));
        }
        let version = cursor.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!(
                "archive version {version} unsupported (expected {VERSION})"
            )));
        }
        let count = cursor.u32()? as usize;
        let mut archive = TensorArchive::new();
        for _ in 0..count {
            let name_len = cursor.u32()? as usize;
            let name = std::str::from_utf8(cursor.take(name_len)?)
                .map_err(|_| Error::Format("archive entry name is not utf-8".into()))?
                .to_string();
            if archive.entries.iter().any(|(n, _)| *n == name) {
                return Err(Error::Format(format!("duplicate archive entry '{name}'")));
            }
            let rank = cursor.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let dim = cursor.u32()? as usize;
                if dim == 0 {
                    return Err(Error::Format(format!("entry '{name}': zero extent in shape")));
                }
                shape.push(dim);
            }
            let numel: usize = shape.iter().product();
            let dtype = Dtype::from_tag(cursor.u8()?)
                .ok_or_else(|| Error::Format(format!("entry '{name}': unknown dtype tag")))?;
            let payload = cursor.take(numel * dtype.size_bytes()).map_err(|_| {
                Error::Format(format!(
                    "entry '{name}': payload truncated (need {} x {} bytes)",
                    numel,
                    dtype.size_bytes()
                ))
            })?;
            let tensor = match dtype {
                Dtype::F32 => ArchiveTensor::F32(decode::<f32>(shape, payload)),
                Dtype::F64 => ArchiveTensor::F64(decode::<f64>(shape, payload)),
            };
            archive.entries.push((name, tensor));
        }
        if cursor.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after the last archive entry",
                bytes.len() - cursor.pos
            )));
        }
        Ok(archive)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn decode<T: Scalar>(shape: Vec<usize>, payload: &[u8]) -> Tensor<T> {
    let size = T::DTYPE.size_bytes();
    let data: Vec<T> = payload.chunks_exact(size).map(T::from_le_slice).collect();
    Tensor::new(shape, data)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format("archive truncated".into()));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn round_trip_is_byte_identical() {
        let mut rng = Rng::new(1);
        let mut archive = TensorArchive::new();
        archive.push_f32("weights", rng.tensor_normal(vec![3, 4], 0.0, 1.0));
        archive.push_f64("oracle", rng.tensor_normal(vec![2], 0.0, 1.0));
        archive.push_u64("step", 12345);
        let bytes = archive.to_bytes();
        let loaded = TensorArchive::from_bytes(&bytes).unwrap();
        assert_eq!(loaded.to_bytes(), bytes);
        assert_eq!(loaded.get_u64("step").unwrap(), 12345);
        assert_eq!(loaded.get_f32("weights").unwrap(), archive.get_f32("weights").unwrap());
    }

    #[test]
    fn empty_archive_is_header_only() {
        let bytes = TensorArchive::new().to_bytes();
        assert_eq!(bytes.len(), 4 + 4 + 4);
        assert_eq!(&bytes[0..4], b"IBQA");
        assert_eq!(TensorArchive::from_bytes(&bytes).unwrap().len(), 0);
    }

    #[test]
    fn hand_crafted_fixture_decodes_exactly() {
        // One f32 tensor "ab" of shape [2] with values [1.0, -2.0].
        let mut bytes: Vec<u8> = Vec::new();
        bytes.extend_from_slice(b"IBQA");
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(b"ab");
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.push(0);
        bytes.extend_from_slice(&1.0f32.to_le_bytes());
        bytes.extend_from_slice(&(-2.0f32).to_le_bytes());
        let archive = TensorArchive::from_bytes(&bytes).unwrap();
        assert_eq!(archive.get_f32("ab").unwrap().data(), &[1.0, -2.0]);
        assert_eq!(archive.to_bytes(), bytes);
    }

    #[test]
    fn corrupted_inputs_are_rejected_without_partial_state() {
        let mut archive = TensorArchive::new();
        archive.push_f32("t", Tensor::new(vec![2], vec![1.0, 2.0]));
        let good = archive.to_bytes();

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(TensorArchive::from_bytes(&bad_magic).is_err());

        let truncated = &good[..good.len() - 3];
        assert!(TensorArchive::from_bytes(truncated).is_err());

        // Corrupt the name length field so it runs past the end.
        let mut bad_len = good.clone();
        bad_len[12] = 0xFF;
        assert!(TensorArchive::from_bytes(&bad_len).is_err());

        let mut trailing = good.clone();
        trailing.push(0);
        assert!(TensorArchive::from_bytes(&trailing).is_err());
    }

    #[test]
    #[should_panic(expected = "duplicate archive entry")]
    fn duplicate_names_rejected() {
        let mut archive = TensorArchive::new();
        archive.push_f32("t", Tensor::scalar(1.0));
        archive.push_f32("t", Tensor::scalar(2.0));
    }
}
