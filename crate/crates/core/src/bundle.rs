//! Named feature matrices in a small binary file.
//!
//! Layout, all integers and reals little-endian: magic `EGFB`, u32 version,
//! u32 entry count, then per entry a u32 name length, the UTF-8 name, u64 rows,
//! u64 columns and `rows * cols` f64 values in row-major order. Entries are
//! stored sorted by name.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::matrix::Matrix;

const MAGIC: &[u8; 4] = b"EGFB";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FeatureBundle {
    pub entries: BTreeMap<String, Matrix>,
}

impl FeatureBundle {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, m: Matrix) -> &mut Self {
        self.entries.insert(name.into(), m);
        self
    }

    pub fn get(&self, name: &str) -> Result<&Matrix> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::invalid(format!("feature bundle has no matrix named {name:?}")))
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, m) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
            out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
            for v in m.as_slice() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<FeatureBundle> {
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            let end = pos
                .checked_add(n)
                .filter(|&e| e <= bytes.len())
                .ok_or_else(|| Error::invalid("truncated feature bundle"))?;
            let s = &bytes[pos..end];
            pos = end;
            Ok(s)
        };
        if take(4)? != MAGIC {
            return Err(Error::invalid("not a feature bundle (bad magic)"));
        }
        let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
        if version != VERSION {
            return Err(Error::invalid(format!(
                "unsupported feature bundle version {version}"
            )));
        }
        let count = u32::from_le_bytes(take(4)?.try_into().unwrap());
        let mut entries = BTreeMap::new();
        for _ in 0..count {
            let len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(take(len)?)
                .map_err(|_| Error::invalid("feature name is not UTF-8"))?
                .to_string();
            let rows = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
            let cols = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
            let n = rows
                .checked_mul(cols)
                .and_then(|n| n.checked_mul(8))
                .ok_or_else(|| Error::invalid("feature matrix too large"))?;
            let data = take(n)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if entries
                .insert(name.clone(), Matrix::from_vec(rows, cols, data)?)
                .is_some()
            {
                return Err(Error::invalid(format!("duplicate feature name {name:?}")));
            }
        }
        if pos != bytes.len() {
            return Err(Error::invalid("trailing bytes after feature bundle"));
        }
        Ok(FeatureBundle { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<FeatureBundle> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        FeatureBundle::decode(&bytes)
            .map_err(|e| Error::invalid(format!("{}: {e}", path.display())))
    }
}
