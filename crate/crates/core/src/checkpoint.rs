//! Versioned binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"GRAD" | version: u32 | count: u32 | count × (rows: u64 | cols: u64 | rows·cols × f64)
//! ```
//!
//! Models decide what their arrays mean; hyperparameters travel as a leading
//! `1×m` array.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{GradError, Result};
use crate::numeric::Matrix;

pub const MAGIC: &[u8; 4] = b"GRAD";
pub const FORMAT_VERSION: u32 = 1;

pub fn encode(arrays: &[&Matrix]) -> Vec<u8> {
    let payload: usize = arrays.iter().map(|m| 16 + 8 * m.as_slice().len()).sum();
    let mut buf = Vec::with_capacity(12 + payload);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
    for m in arrays {
        buf.extend_from_slice(&(m.rows() as u64).to_le_bytes());
        buf.extend_from_slice(&(m.cols() as u64).to_le_bytes());
        for v in m.as_slice() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

pub fn decode(mut bytes: &[u8]) -> Result<Vec<Matrix>> {
    let mut magic = [0u8; 4];
    read_exact(&mut bytes, &mut magic)?;
    if &magic != MAGIC {
        return Err(GradError::Checkpoint("bad magic bytes".into()));
    }
    let version = read_u32(&mut bytes)?;
    if version != FORMAT_VERSION {
        return Err(GradError::Checkpoint(format!(
            "unsupported format version {version}"
        )));
    }
    let count = read_u32(&mut bytes)? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let rows = read_u64(&mut bytes)? as usize;
        let cols = read_u64(&mut bytes)? as usize;
        let len = rows
            .checked_mul(cols)
            .filter(|&l| l.saturating_mul(8) <= bytes.len())
            .ok_or_else(|| GradError::Checkpoint("array extends past end of data".into()))?;
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            let mut b = [0u8; 8];
            read_exact(&mut bytes, &mut b)?;
            data.push(f64::from_le_bytes(b));
        }
        out.push(Matrix::from_vec(rows, cols, data)?);
    }
    if !bytes.is_empty() {
        return Err(GradError::Checkpoint(format!(
            "{} trailing bytes after last array",
            bytes.len()
        )));
    }
    Ok(out)
}

pub fn save(path: &Path, arrays: &[&Matrix]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| GradError::io(path, e))?;
    f.write_all(&encode(arrays))
        .map_err(|e| GradError::io(path, e))
}

pub fn load(path: &Path) -> Result<Vec<Matrix>> {
    let bytes = fs::read(path).map_err(|e| GradError::io(path, e))?;
    decode(&bytes)
}

/// Packs scalars into the leading hyperparameter row.
pub fn scalars(values: &[f64]) -> Matrix {
    Matrix::from_vec(1, values.len(), values.to_vec()).expect("1xN from N values")
}

fn read_exact(bytes: &mut &[u8], out: &mut [u8]) -> Result<()> {
    bytes
        .read_exact(out)
        .map_err(|_| GradError::Checkpoint("truncated checkpoint".into()))
}

fn read_u32(bytes: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(bytes, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(bytes: &mut &[u8]) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(bytes, &mut b)?;
    Ok(u64::from_le_bytes(b))
}
