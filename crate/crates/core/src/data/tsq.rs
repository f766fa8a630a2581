//! TSQ sequence container.
//!
//! Layout: 8-byte magic `TSQv0001`, a 4-byte little-endian header length, a
//! UTF-8 JSON header `{n_t, n_y, n_x, dt, dtype: "f32le"}`, then
//! `n_t * n_y * n_x` little-endian `f32` values, frame-major and row-major.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DataError, Result, ThermogramSequence};

pub const TSQ_MAGIC: &[u8; 8] = b"TSQv0001";
const MAGIC_PREFIX: &[u8; 4] = b"TSQv";
const DTYPE: &str = "f32le";

#[derive(Debug, Serialize, Deserialize)]
struct TsqHeader {
    n_t: usize,
    n_y: usize,
    n_x: usize,
    dt: f64,
    dtype: String,
}

pub fn write_tsq(seq: &ThermogramSequence, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tsq_to(seq, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn write_tsq_to<W: Write>(seq: &ThermogramSequence, w: &mut W) -> Result<()> {
    let header = TsqHeader {
        n_t: seq.n_t(),
        n_y: seq.n_y(),
        n_x: seq.n_x(),
        dt: seq.dt(),
        dtype: DTYPE.to_string(),
    };
    let header = serde_json::to_vec(&header).map_err(|e| DataError::Header(e.to_string()))?;
    let payload = encode_f32le(seq.frames())?;
    w.write_all(TSQ_MAGIC)?;
    w.write_all(&(header.len() as u32).to_le_bytes())?;
    w.write_all(&header)?;
    w.write_all(&payload)?;
    Ok(())
}

pub fn read_tsq(path: impl AsRef<Path>) -> Result<ThermogramSequence> {
    let mut r = BufReader::new(File::open(path)?);
    read_tsq_from(&mut r)
}

pub fn read_tsq_from<R: Read>(r: &mut R) -> Result<ThermogramSequence> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != TSQ_MAGIC {
        if &magic[..4] == MAGIC_PREFIX {
            return Err(DataError::Unsupported(
                String::from_utf8_lossy(&magic[4..]).into_owned(),
            ));
        }
        return Err(DataError::BadMagic {
            expected: String::from_utf8_lossy(TSQ_MAGIC).into_owned(),
        });
    }
    let header: TsqHeader = read_json_header(r)?;
    if header.dtype != DTYPE {
        return Err(DataError::Unsupported(format!("dtype {}", header.dtype)));
    }
    if header.n_t < 2 || header.n_y == 0 || header.n_x == 0 {
        return Err(DataError::InvalidDimensions(format!(
            "n_t={}, n_y={}, n_x={}",
            header.n_t, header.n_y, header.n_x
        )));
    }
    let count = header
        .n_t
        .checked_mul(header.n_y)
        .and_then(|v| v.checked_mul(header.n_x))
        .ok_or_else(|| DataError::InvalidDimensions("dimension overflow".into()))?;
    let frames = read_f32le_payload(r, count)?;
    ThermogramSequence::new(header.n_t, header.n_y, header.n_x, header.dt, frames)
}

pub(crate) fn read_json_header<R: Read, T: serde::de::DeserializeOwned>(r: &mut R) -> Result<T> {
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let len = u32::from_le_bytes(len) as usize;
    let mut buf = Vec::new();
    r.take(len as u64).read_to_end(&mut buf)?;
    if buf.len() != len {
        return Err(DataError::Header(format!(
            "header truncated: expected {len} bytes, found {}",
            buf.len()
        )));
    }
    serde_json::from_slice(&buf).map_err(|e| DataError::Header(e.to_string()))
}

/// Reads exactly `count` values and rejects trailing bytes.
pub(crate) fn read_f32le_payload<R: Read>(r: &mut R, count: usize) -> Result<Vec<f64>> {
    let expected = count * 4;
    let mut buf = Vec::with_capacity(expected);
    r.read_to_end(&mut buf)?;
    if buf.len() != expected {
        return Err(DataError::SizeMismatch {
            expected,
            found: buf.len(),
        });
    }
    Ok(buf
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect())
}

/// Narrows to f32, rejecting anything that is or becomes non-finite.
pub(crate) fn encode_f32le(values: &[f64]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(values.len() * 4);
    for (i, &v) in values.iter().enumerate() {
        let f = v as f32;
        if !f.is_finite() {
            return Err(DataError::NonFinite(i));
        }
        out.extend_from_slice(&f.to_le_bytes());
    }
    Ok(out)
}
