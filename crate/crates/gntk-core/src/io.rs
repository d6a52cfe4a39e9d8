//! Binary kernel-matrix files: the magic `GNTKMAT1`, the dimension `n` as a
//! little-endian u64, then `n²` little-endian f64 values in row-major order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

pub const KERNEL_MAGIC: &[u8; 8] = b"GNTKMAT1";

pub fn write_kernel(path: impl AsRef<Path>, k: &DMatrix<f64>) -> Result<()> {
    let path = path.as_ref();
    if k.nrows() != k.ncols() {
        return Err(Error::Validation(format!(
            "kernel must be square, got {}x{}",
            k.nrows(),
            k.ncols()
        )));
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let n = k.nrows();
    let mut buf = Vec::with_capacity(16 + 8 * n * n);
    buf.extend_from_slice(KERNEL_MAGIC);
    buf.extend_from_slice(&(n as u64).to_le_bytes());
    for i in 0..n {
        for j in 0..n {
            buf.extend_from_slice(&k[(i, j)].to_le_bytes());
        }
    }
    w.write_all(&buf).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_kernel(path: impl AsRef<Path>) -> Result<DMatrix<f64>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut head = [0u8; 16];
    r.read_exact(&mut head)
        .map_err(|_| Error::Format(format!("{}: truncated header", path.display())))?;
    if &head[..8] != KERNEL_MAGIC {
        return Err(Error::Format(format!("{}: bad magic bytes", path.display())));
    }
    let n = u64::from_le_bytes(head[8..16].try_into().expect("8 bytes")) as usize;
    let len = n
        .checked_mul(n)
        .and_then(|m| m.checked_mul(8))
        .ok_or_else(|| Error::Format(format!("{}: dimension {n} overflows", path.display())))?;
    let mut body = Vec::with_capacity(len);
    r.read_to_end(&mut body).map_err(|e| Error::io(path, e))?;
    if body.len() != len {
        return Err(Error::Format(format!(
            "{}: expected {len} payload bytes, found {}",
            path.display(),
            body.len()
        )));
    }
    let vals = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    Ok(DMatrix::from_row_iterator(n, n, vals))
}
