//! Self-describing binary tensor container, used by dataset items and
//! checkpoints.
//!
//! Layout (all integers little-endian):
//!   magic "IRTN" | version u8 | dtype u8 (1 = f64) | rank u8 | extents u64[rank]
//!   | payload dtype[prod(extents)]
//!
//! Checkpoints store a sequence of named records: name length u32, utf-8 name,
//! then a tensor container.

use crate::error::{IrimError, Result};
use ndarray::{ArrayD, ArrayViewD, IxDyn};
use sha2::{Digest, Sha256};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"IRTN";
const VERSION: u8 = 1;
const DTYPE_F64: u8 = 1;

pub fn write_tensor<W: Write>(w: &mut W, x: &ArrayViewD<f64>) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&[VERSION, DTYPE_F64, x.ndim() as u8])?;
    for &e in x.shape() {
        w.write_all(&(e as u64).to_le_bytes())?;
    }
    for &v in x.iter() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tensor<R: Read>(r: &mut R, path: &str) -> Result<ArrayD<f64>> {
    let bad = |reason: &str| IrimError::Format {
        path: path.to_string(),
        reason: reason.to_string(),
    };
    let mut head = [0u8; 7];
    r.read_exact(&mut head).map_err(|_| bad("truncated header"))?;
    if &head[0..4] != MAGIC {
        return Err(bad("bad magic"));
    }
    if head[4] != VERSION {
        return Err(bad("unsupported version"));
    }
    if head[5] != DTYPE_F64 {
        return Err(bad("unsupported dtype"));
    }
    let rank = head[6] as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut b = [0u8; 8];
        r.read_exact(&mut b).map_err(|_| bad("truncated extents"))?;
        shape.push(u64::from_le_bytes(b) as usize);
    }
    let count: usize = shape.iter().product();
    let mut data = Vec::with_capacity(count);
    let mut b = [0u8; 8];
    for _ in 0..count {
        r.read_exact(&mut b).map_err(|_| bad("truncated payload"))?;
        data.push(f64::from_le_bytes(b));
    }
    ArrayD::from_shape_vec(IxDyn(&shape), data).map_err(|_| bad("shape/payload mismatch"))
}

pub fn write_named_tensor<W: Write>(w: &mut W, name: &str, x: &ArrayViewD<f64>) -> Result<()> {
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    write_tensor(w, x)
}

pub fn read_named_tensor<R: Read>(r: &mut R, path: &str) -> Result<Option<(String, ArrayD<f64>)>> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let n = u32::from_le_bytes(len) as usize;
    let mut name = vec![0u8; n];
    r.read_exact(&mut name)?;
    let name = String::from_utf8(name).map_err(|_| IrimError::Format {
        path: path.to_string(),
        reason: "invalid utf-8 tensor name".to_string(),
    })?;
    let tensor = read_tensor(r, path)?;
    Ok(Some((name, tensor)))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    hex_string(&h.finalize())
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path)?))
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Atomic file write: write to a temp sibling, then rename into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}
