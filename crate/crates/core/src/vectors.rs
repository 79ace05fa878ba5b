//! Binary container for fixed-dimension `f32` vectors (hidden states and
//! chunk embeddings).
//!
//! Layout, all little-endian:
//!
//! | offset | size | field                       |
//! |--------|------|-----------------------------|
//! | 0      | 4    | magic `WSCV`                |
//! | 4      | 4    | format version (`u32`)      |
//! | 8      | 8    | row count (`u64`)           |
//! | 16     | 4    | dimension (`u32`)           |
//! | 20     | 1    | dtype code, `0x01` = `f32`  |
//! | 21     | ...  | rows, row-major             |

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"WSCV";
pub const FORMAT_VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 0x01;
pub const HEADER_LEN: usize = 21;

#[derive(Debug, Clone, PartialEq)]
pub struct VectorTable {
    dim: usize,
    count: usize,
    data: Vec<f32>,
}

impl VectorTable {
    /// An empty table whose rows will have `dim` values.
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidConfig("vector dim must be positive".into()));
        }
        Ok(Self {
            dim,
            count: 0,
            data: Vec::new(),
        })
    }

    pub fn from_raw(dim: usize, count: usize, data: Vec<f32>) -> Result<Self> {
        let table = Self { dim, count, data };
        table.check()?;
        Ok(table)
    }

    pub fn from_rows<R: AsRef<[f32]>>(dim: usize, rows: &[R]) -> Result<Self> {
        let mut table = Self::new(dim)?;
        for row in rows {
            table.push_row(row.as_ref())?;
        }
        Ok(table)
    }

    pub fn push_row(&mut self, row: &[f32]) -> Result<()> {
        if row.len() != self.dim {
            return Err(Error::DimMismatch {
                expected: self.dim,
                found: row.len(),
            });
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "row {} contains a non-finite value",
                self.count
            )));
        }
        self.data.extend_from_slice(row);
        self.count += 1;
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn row(&self, i: usize) -> Option<&[f32]> {
        if i >= self.count {
            return None;
        }
        Some(&self.data[i * self.dim..(i + 1) * self.dim])
    }

    /// Rows `first..first + n`, or `None` if the range runs past the table.
    pub fn rows_range(&self, first: usize, n: usize) -> Option<Vec<&[f32]>> {
        let end = first.checked_add(n)?;
        if end > self.count {
            return None;
        }
        Some((first..end).map(|i| self.row(i).unwrap()).collect())
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        // chunks_exact panics on a zero size; an empty dim-0 table has no rows
        self.data.chunks_exact(self.dim.max(1)).take(self.count)
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    fn check(&self) -> Result<()> {
        if self.dim == 0 && self.count > 0 {
            return Err(Error::InvalidConfig(
                "dim = 0 with a non-zero row count".into(),
            ));
        }
        let expected = self
            .count
            .checked_mul(self.dim)
            .ok_or_else(|| Error::InvalidConfig("row count overflows".into()))?;
        if self.data.len() != expected {
            return Err(Error::InvalidConfig(format!(
                "{} values present, {} rows of dim {} require {}",
                self.data.len(),
                self.count,
                self.dim,
                expected
            )));
        }
        if let Some(pos) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "non-finite value in row {}",
                pos / self.dim
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.check()?;
        let dim = u32::try_from(self.dim)
            .map_err(|_| Error::InvalidConfig("dim does not fit in u32".into()))?;
        let mut out = Vec::with_capacity(HEADER_LEN + self.data.len() * 4);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.count as u64).to_le_bytes());
        out.extend_from_slice(&dim.to_le_bytes());
        out.push(DTYPE_F32);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() || bytes[..4] != MAGIC {
            return Err(Error::NotVectorTable);
        }
        if bytes.len() < HEADER_LEN {
            return Err(Error::CorruptTable(format!(
                "header truncated at {} bytes",
                bytes.len()
            )));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let count = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let dim = u32::from_le_bytes(bytes[16..20].try_into().unwrap()) as usize;
        let dtype = bytes[20];
        if dtype != DTYPE_F32 {
            return Err(Error::UnsupportedDtype(dtype));
        }
        if dim == 0 && count > 0 {
            return Err(Error::CorruptTable("dim = 0 with rows present".into()));
        }
        let payload = &bytes[HEADER_LEN..];
        let expected = usize::try_from(count)
            .ok()
            .and_then(|c| c.checked_mul(dim))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::CorruptTable(format!("row count {count} is implausible")))?;
        if payload.len() != expected {
            return Err(Error::CorruptTable(format!(
                "header declares {count} rows of dim {dim} ({expected} bytes), payload has {} bytes",
                payload.len()
            )));
        }
        let data: Vec<f32> = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::CorruptTable(format!(
                "non-finite value in row {}",
                pos / dim
            )));
        }
        Ok(Self {
            dim,
            count: count as usize,
            data,
        })
    }
}

pub fn save_vector_table(path: impl AsRef<Path>, table: &VectorTable) -> Result<()> {
    let bytes = table.to_bytes()?;
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}

pub fn load_vector_table(path: impl AsRef<Path>) -> Result<VectorTable> {
    VectorTable::from_bytes(&fs::read(path)?)
}
