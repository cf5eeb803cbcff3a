//! FCMT, the bit-exact binary tensor container used for visual features and
//! checkpoint parameter blobs.
//!
//! Layout: magic bytes `0x46 0x43 0x4D 0x54` ("FCMT"), a version byte, an
//! ndim byte, `ndim` little-endian u32 dimensions, then the row-major
//! little-endian payload. Version 1 carries f32 values (feature files);
//! version 2 carries f64 values (checkpoints, where bit-exact round-trips of
//! training state are required). Trailing bytes are an error.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

const MAGIC: [u8; 4] = [0x46, 0x43, 0x4D, 0x54];
const VERSION_F32: u8 = 0x01;
const VERSION_F64: u8 = 0x02;
const MAX_NDIM: usize = 8;

fn encode_header(version: u8, dims: &[usize]) -> Result<Vec<u8>> {
    if dims.is_empty() || dims.len() > MAX_NDIM {
        return Err(Error::format(format!(
            "FCMT supports 1..={MAX_NDIM} dimensions, got {}",
            dims.len()
        )));
    }
    if dims.iter().any(|&d| d == 0 || d > u32::MAX as usize) {
        return Err(Error::format(format!("FCMT dimensions out of range: {dims:?}")));
    }
    let mut out = Vec::with_capacity(6 + 4 * dims.len());
    out.extend_from_slice(&MAGIC);
    out.push(version);
    out.push(dims.len() as u8);
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    Ok(out)
}

fn decode_header(bytes: &[u8], path: &Path) -> Result<(u8, Vec<usize>, usize)> {
    let fail = |detail: String| Error::format(format!("{}: {detail}", path.display()));
    if bytes.len() < 6 {
        return Err(fail("file too short for an FCMT header".into()));
    }
    if bytes[0..4] != MAGIC {
        return Err(fail(format!("bad magic {:02x?}", &bytes[0..4])));
    }
    let version = bytes[4];
    let ndim = bytes[5] as usize;
    if ndim == 0 || ndim > MAX_NDIM {
        return Err(fail(format!("unsupported ndim {ndim}")));
    }
    let header_len = 6 + 4 * ndim;
    if bytes.len() < header_len {
        return Err(fail("file truncated inside the dimension list".into()));
    }
    let mut dims = Vec::with_capacity(ndim);
    for i in 0..ndim {
        let off = 6 + 4 * i;
        let d = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
        if d == 0 {
            return Err(fail("zero dimension".into()));
        }
        dims.push(d);
    }
    Ok((version, dims, header_len))
}

fn check_payload(
    bytes: &[u8],
    header_len: usize,
    count: usize,
    elem: usize,
    path: &Path,
) -> Result<()> {
    let expected = header_len + count * elem;
    if bytes.len() < expected {
        return Err(Error::format(format!(
            "{}: payload truncated ({} bytes, expected {expected})",
            path.display(),
            bytes.len()
        )));
    }
    if bytes.len() > expected {
        return Err(Error::format(format!(
            "{}: {} trailing bytes after the payload",
            path.display(),
            bytes.len() - expected
        )));
    }
    Ok(())
}

/// Writes an f32 tensor (container version 1).
pub fn write_f32(path: &Path, dims: &[usize], values: &[f32]) -> Result<()> {
    let count: usize = dims.iter().product();
    if count != values.len() {
        return Err(Error::format(format!(
            "dims {dims:?} imply {count} values, got {}",
            values.len()
        )));
    }
    let mut bytes = encode_header(VERSION_F32, dims)?;
    bytes.reserve(4 * values.len());
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads an f32 tensor (container version 1).
pub fn read_f32(path: &Path) -> Result<(Vec<usize>, Vec<f32>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (version, dims, header_len) = decode_header(&bytes, path)?;
    if version != VERSION_F32 {
        return Err(Error::format(format!(
            "{}: expected an f32 container (version 1), found version {version}",
            path.display()
        )));
    }
    let count: usize = dims.iter().product();
    check_payload(&bytes, header_len, count, 4, path)?;
    let values = bytes[header_len..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((dims, values))
}

/// Writes an f64 tensor (container version 2).
pub fn write_f64(path: &Path, dims: &[usize], values: &[f64]) -> Result<()> {
    let count: usize = dims.iter().product();
    if count != values.len() {
        return Err(Error::format(format!(
            "dims {dims:?} imply {count} values, got {}",
            values.len()
        )));
    }
    let mut bytes = encode_header(VERSION_F64, dims)?;
    bytes.reserve(8 * values.len());
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads an f64 tensor (container version 2).
pub fn read_f64(path: &Path) -> Result<(Vec<usize>, Vec<f64>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (version, dims, header_len) = decode_header(&bytes, path)?;
    if version != VERSION_F64 {
        return Err(Error::format(format!(
            "{}: expected an f64 container (version 2), found version {version}",
            path.display()
        )));
    }
    let count: usize = dims.iter().product();
    check_payload(&bytes, header_len, count, 8, path)?;
    let values = bytes[header_len..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((dims, values))
}

/// Writes a [`Tensor`] as an f64 container, preserving its shape.
pub fn write_tensor(path: &Path, tensor: &Tensor) -> Result<()> {
    write_f64(path, tensor.shape(), tensor.data())
}

/// Reads an f64 container into a [`Tensor`].
pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let (dims, values) = read_f64(path)?;
    Tensor::new(dims, values)
}

/// Reads an f32 feature file into an f64 [`Tensor`] for computation.
pub fn read_f32_tensor(path: &Path) -> Result<Tensor> {
    let (dims, values) = read_f32(path)?;
    Tensor::new(dims, values.into_iter().map(f64::from).collect())
}
