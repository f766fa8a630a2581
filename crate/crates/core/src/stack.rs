//! Image stacks: latent images, PCA score images, TSR coefficient and PPT phase
//! images all travel in this container.
//!
//! File layout mirrors the TSQ container: 8-byte magic `IMSTK001`, 4-byte
//! little-endian header length, JSON header, then `count * n_y * n_x`
//! little-endian `f32` values, image-major then row-major.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::tsq::{encode_f32le, read_f32le_payload, read_json_header};
use crate::data::{DataError, Result};

pub const STACK_MAGIC: &[u8; 8] = b"IMSTK001";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageStack {
    pub n_y: usize,
    pub n_x: usize,
    /// Producing method, e.g. `caae`, `pca`, `tsr`, `ppt`.
    pub method: String,
    pub labels: Vec<String>,
    /// Free-form provenance (configuration, checkpoint hash, dataset id).
    #[serde(default)]
    pub provenance: serde_json::Value,
    #[serde(skip)]
    pub images: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct StackHeader {
    count: usize,
    n_y: usize,
    n_x: usize,
    dtype: String,
    method: String,
    labels: Vec<String>,
    #[serde(default)]
    provenance: serde_json::Value,
}

impl ImageStack {
    pub fn new(n_y: usize, n_x: usize, method: impl Into<String>, images: Vec<Vec<f64>>) -> Result<Self> {
        let labels = (0..images.len()).map(|i| format!("{i}")).collect();
        Self::with_labels(n_y, n_x, method, images, labels)
    }

    pub fn with_labels(
        n_y: usize,
        n_x: usize,
        method: impl Into<String>,
        images: Vec<Vec<f64>>,
        labels: Vec<String>,
    ) -> Result<Self> {
        if labels.len() != images.len() {
            return Err(DataError::InvalidDimensions(format!(
                "{} labels for {} images",
                labels.len(),
                images.len()
            )));
        }
        for img in &images {
            if img.len() != n_y * n_x {
                return Err(DataError::SizeMismatch {
                    expected: n_y * n_x,
                    found: img.len(),
                });
            }
            if let Some(i) = img.iter().position(|v| !v.is_finite()) {
                return Err(DataError::NonFinite(i));
            }
        }
        Ok(Self {
            n_y,
            n_x,
            method: method.into(),
            labels,
            provenance: serde_json::Value::Null,
            images,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Per-image (min, max).
    pub fn ranges(&self) -> Vec<(f64, f64)> {
        self.images
            .iter()
            .map(|img| {
                img.iter()
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
            })
            .collect()
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let header = StackHeader {
            count: self.images.len(),
            n_y: self.n_y,
            n_x: self.n_x,
            dtype: "f32le".into(),
            method: self.method.clone(),
            labels: self.labels.clone(),
            provenance: self.provenance.clone(),
        };
        let header = serde_json::to_vec(&header).map_err(|e| DataError::Header(e.to_string()))?;
        let flat: Vec<f64> = self.images.iter().flatten().copied().collect();
        let payload = encode_f32le(&flat)?;
        w.write_all(STACK_MAGIC)?;
        w.write_all(&(header.len() as u32).to_le_bytes())?;
        w.write_all(&header)?;
        w.write_all(&payload)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        Self::read_from(&mut r)
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != STACK_MAGIC {
            return Err(DataError::BadMagic {
                expected: String::from_utf8_lossy(STACK_MAGIC).into_owned(),
            });
        }
        let header: StackHeader = read_json_header(r)?;
        if header.dtype != "f32le" {
            return Err(DataError::Unsupported(format!("dtype {}", header.dtype)));
        }
        let size = header.n_y * header.n_x;
        let flat = read_f32le_payload(r, header.count * size)?;
        let images = if size == 0 {
            Vec::new()
        } else {
            flat.chunks_exact(size).map(<[f64]>::to_vec).collect()
        };
        let mut stack = Self::with_labels(header.n_y, header.n_x, header.method, images, header.labels)?;
        stack.provenance = header.provenance;
        Ok(stack)
    }
}
