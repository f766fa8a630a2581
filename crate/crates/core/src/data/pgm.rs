//! Binary PGM (P5) reading and writing.
//!
//! Region masks use 8-bit samples, 0 = sound and 255 = defect. Image exports
//! use 16-bit big-endian samples as the format requires.

use std::fs;
use std::path::Path;

use super::{DataError, Result};

/// Writes an 8-bit mask; `true` pixels become 255.
pub fn write_pgm_mask(path: impl AsRef<Path>, n_y: usize, n_x: usize, defect: &[bool]) -> Result<()> {
    if defect.len() != n_y * n_x {
        return Err(DataError::SizeMismatch {
            expected: n_y * n_x,
            found: defect.len(),
        });
    }
    let mut buf = format!("P5\n{n_x} {n_y}\n255\n").into_bytes();
    buf.extend(defect.iter().map(|&d| if d { 255u8 } else { 0 }));
    fs::write(path, buf)?;
    Ok(())
}

/// Reads an 8-bit mask. Any nonzero sample counts as defect.
pub fn read_pgm_mask(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<bool>)> {
    let bytes = fs::read(path)?;
    let (n_x, n_y, maxval, offset) = parse_header(&bytes)?;
    if maxval > 255 {
        return Err(DataError::Pgm(format!("mask must be 8-bit, maxval {maxval}")));
    }
    let body = &bytes[offset..];
    if body.len() != n_x * n_y {
        return Err(DataError::SizeMismatch {
            expected: n_x * n_y,
            found: body.len(),
        });
    }
    Ok((n_y, n_x, body.iter().map(|&b| b != 0).collect()))
}

pub fn write_pgm_u16(path: impl AsRef<Path>, n_y: usize, n_x: usize, samples: &[u16]) -> Result<()> {
    if samples.len() != n_y * n_x {
        return Err(DataError::SizeMismatch {
            expected: n_y * n_x,
            found: samples.len(),
        });
    }
    let mut buf = format!("P5\n{n_x} {n_y}\n65535\n").into_bytes();
    for s in samples {
        buf.extend_from_slice(&s.to_be_bytes());
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_pgm_u16(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<u16>)> {
    let bytes = fs::read(path)?;
    let (n_x, n_y, maxval, offset) = parse_header(&bytes)?;
    let body = &bytes[offset..];
    if maxval < 256 {
        if body.len() != n_x * n_y {
            return Err(DataError::SizeMismatch {
                expected: n_x * n_y,
                found: body.len(),
            });
        }
        return Ok((n_y, n_x, body.iter().map(|&b| b as u16).collect()));
    }
    if body.len() != 2 * n_x * n_y {
        return Err(DataError::SizeMismatch {
            expected: 2 * n_x * n_y,
            found: body.len(),
        });
    }
    let samples = body
        .chunks_exact(2)
        .map(|c| u16::from_be_bytes([c[0], c[1]]))
        .collect();
    Ok((n_y, n_x, samples))
}

/// Returns (width, height, maxval, payload offset).
fn parse_header(bytes: &[u8]) -> Result<(usize, usize, usize, usize)> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(DataError::Pgm("missing P5 magic".into()));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(DataError::Pgm("truncated header".into())),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| DataError::Pgm("bad header number".into()))?;
    }
    // exactly one whitespace byte before the raster
    if !bytes.get(pos).is_some_and(|b| b.is_ascii_whitespace()) {
        return Err(DataError::Pgm("missing separator before raster".into()));
    }
    let [w, h, maxval] = fields;
    if w == 0 || h == 0 || maxval == 0 || maxval > 65535 {
        return Err(DataError::Pgm(format!("bad header {w}x{h} max {maxval}")));
    }
    Ok((w, h, maxval, pos + 1))
}
