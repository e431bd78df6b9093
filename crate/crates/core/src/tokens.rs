//! Token dataset file: the bridge from stage 1 to stage 2.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic "IBQK" | K u32 | T u32 | num_classes u32 | N u32
//! per record: class u16 | T x index u32
//! ```
//!
//! Every stored index is validated against K on load and save.

use crate::error::{Error, Result};
use std::path::Path;

const MAGIC: &[u8; 4] = b"IBQK";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenRecord {
    pub class: u16,
    pub indices: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenDataset {
    /// Vocabulary size (codebook K).
    pub k: u32,
    /// Tokens per record, h' * w' in raster-scan order.
    pub t: u32,
    pub num_classes: u32,
    pub records: Vec<TokenRecord>,
}

impl TokenDataset {
    pub fn new(k: u32, t: u32, num_classes: u32) -> Self {
        TokenDataset { k, t, num_classes, records: Vec::new() }
    }

    pub fn push(&mut self, class: u16, indices: Vec<u32>) -> Result<()> {
        if indices.len() != self.t as usize {
            return Err(Error::Data(format!(
                "record has {} indices, dataset T is {}",
                indices.len(),
                self.t
            )));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.k) {
            return Err(Error::Data(format!("token index {bad} >= K {}", self.k)));
        }
        if (class as u32) >= self.num_classes {
            return Err(Error::Data(format!(
                "class {class} >= num_classes {}",
                self.num_classes
            )));
        }
        self.records.push(TokenRecord { class, indices });
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.k.to_le_bytes());
        out.extend_from_slice(&self.t.to_le_bytes());
        out.extend_from_slice(&self.num_classes.to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for record in &self.records {
            out.extend_from_slice(&record.class.to_le_bytes());
            for &index in &record.indices {
                out.extend_from_slice(&index.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let need = |at: usize, n: usize| -> Result<&[u8]> {
            bytes
                .get(at..at + n)
                .ok_or_else(|| Error::Format("token dataset truncated".into()))
        };
        if need(0, 4)? != MAGIC {
            return Err(Error::Format("bad token dataset magic (expected IBQK)".into()));
        }
        let u32at = |at: usize| -> Result<u32> {
            Ok(u32::from_le_bytes(need(at, 4)?.try_into().expect("4 bytes")))
        };
        let k = u32at(4)?;
        let t = u32at(8)?;
        let num_classes = u32at(12)?;
        let n = u32at(16)? as usize;
        if k == 0 || t == 0 {
            return Err(Error::Format("token dataset with zero K or T".into()));
        }
        let record_len = 2 + 4 * t as usize;
        let expected = 20 + n * record_len;
        if bytes.len() != expected {
            return Err(Error::Format(format!(
                "token dataset length {} != expected {expected} for {n} records",
                bytes.len()
            )));
        }
        let mut dataset = TokenDataset::new(k, t, num_classes);
        for r in 0..n {
            let base = 20 + r * record_len;
            let class = u16::from_le_bytes(need(base, 2)?.try_into().expect("2 bytes"));
            let mut indices = Vec::with_capacity(t as usize);
            for i in 0..t as usize {
                indices.push(u32at(base + 2 + 4 * i)?);
            }
            dataset.push(class, indices)?;
        }
        Ok(dataset)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
