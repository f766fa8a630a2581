//! Thermogram containers and the pixel-matrix view used by every analysis stage.
//!
//! A [`ThermogramSequence`] is the `N_t × N_y × N_x` stack recorded after the
//! heat pulse. [`reshape_raster`] flattens it into a [`PixelMatrix`] with one
//! row per pixel (row index `p = y * n_x + x`), and [`PixelMatrix::center`]
//! removes each pixel's temporal mean.
//!
//! Values are treated as unitless; they may be camera counts or kelvin.

mod pgm;
pub(crate) mod tsq;

pub use pgm::{read_pgm_mask, read_pgm_u16, write_pgm_mask, write_pgm_u16};
pub use tsq::{read_tsq, read_tsq_from, write_tsq, write_tsq_to, TSQ_MAGIC};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid dimensions: {0}")]
    InvalidDimensions(String),
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
    #[error("matrix is already centered")]
    AlreadyCentered,
    #[error("matrix is not centered")]
    NotCentered,
    #[error("bad magic: expected {expected:?}")]
    BadMagic { expected: String },
    #[error("unsupported version or dtype: {0}")]
    Unsupported(String),
    #[error("payload size mismatch: header implies {expected} bytes, found {found}")]
    SizeMismatch { expected: usize, found: usize },
    #[error("malformed header: {0}")]
    Header(String),
    #[error("malformed PGM: {0}")]
    Pgm(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// A pulsed-thermography recording: `n_t` frames of `n_y × n_x` pixels,
/// stored frame-major then row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ThermogramSequence {
    n_t: usize,
    n_y: usize,
    n_x: usize,
    dt: f64,
    frames: Vec<f64>,
}

impl ThermogramSequence {
    pub fn new(n_t: usize, n_y: usize, n_x: usize, dt: f64, frames: Vec<f64>) -> Result<Self> {
        if n_t < 2 || n_y == 0 || n_x == 0 {
            return Err(DataError::InvalidDimensions(format!(
                "need n_t >= 2, n_y >= 1, n_x >= 1; got n_t={n_t}, n_y={n_y}, n_x={n_x}"
            )));
        }
        if !(dt.is_finite() && dt > 0.0) {
            return Err(DataError::InvalidDimensions(format!("dt must be > 0, got {dt}")));
        }
        let expected = n_t * n_y * n_x;
        if frames.len() != expected {
            return Err(DataError::SizeMismatch {
                expected,
                found: frames.len(),
            });
        }
        if let Some(i) = frames.iter().position(|v| !v.is_finite()) {
            return Err(DataError::NonFinite(i));
        }
        Ok(Self {
            n_t,
            n_y,
            n_x,
            dt,
            frames,
        })
    }

    pub fn n_t(&self) -> usize {
        self.n_t
    }

    pub fn n_y(&self) -> usize {
        self.n_y
    }

    pub fn n_x(&self) -> usize {
        self.n_x
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn n_pixels(&self) -> usize {
        self.n_y * self.n_x
    }

    /// Flat frame-major buffer.
    pub fn frames(&self) -> &[f64] {
        &self.frames
    }

    pub fn frame(&self, k: usize) -> &[f64] {
        let len = self.n_pixels();
        &self.frames[k * len..(k + 1) * len]
    }

    pub fn value(&self, k: usize, y: usize, x: usize) -> f64 {
        self.frames[(k * self.n_y + y) * self.n_x + x]
    }

    /// Acquisition time of frame `k`. The first frame sits at `dt`, not at zero.
    pub fn time(&self, k: usize) -> f64 {
        (k + 1) as f64 * self.dt
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.n_t).map(|k| self.time(k)).collect()
    }
}

/// Row `p` holds the time series of pixel `(p / n_x, p % n_x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelMatrix {
    n_y: usize,
    n_x: usize,
    n_t: usize,
    dt: f64,
    data: Vec<f64>,
    centered: bool,
    mean_frame: Option<Vec<f64>>,
}

impl PixelMatrix {
    /// Builds an uncentered matrix from `rows * n_t` row-major values.
    pub fn from_rows(n_y: usize, n_x: usize, n_t: usize, dt: f64, data: Vec<f64>) -> Result<Self> {
        if n_y == 0 || n_x == 0 || n_t == 0 {
            return Err(DataError::InvalidDimensions(format!(
                "empty pixel matrix {n_y}x{n_x}x{n_t}"
            )));
        }
        if data.len() != n_y * n_x * n_t {
            return Err(DataError::SizeMismatch {
                expected: n_y * n_x * n_t,
                found: data.len(),
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(DataError::NonFinite(i));
        }
        Ok(Self {
            n_y,
            n_x,
            n_t,
            dt,
            data,
            centered: false,
            mean_frame: None,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.n_y * self.n_x
    }

    pub fn n_t(&self) -> usize {
        self.n_t
    }

    pub fn n_y(&self) -> usize {
        self.n_y
    }

    pub fn n_x(&self) -> usize {
        self.n_x
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn is_centered(&self) -> bool {
        self.centered
    }

    pub fn mean_frame(&self) -> Option<&[f64]> {
        self.mean_frame.as_deref()
    }

    pub fn row(&self, p: usize) -> &[f64] {
        &self.data[p * self.n_t..(p + 1) * self.n_t]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.n_t)
    }

    /// Row-major `P × n_t` buffer.
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel_of(&self, p: usize) -> (usize, usize) {
        (p / self.n_x, p % self.n_x)
    }

    pub fn row_of(&self, y: usize, x: usize) -> usize {
        y * self.n_x + x
    }

    /// Subtracts each row's temporal mean and keeps the means for later restoration.
    pub fn center(&self) -> Result<PixelMatrix> {
        if self.centered {
            return Err(DataError::AlreadyCentered);
        }
        let mut data = self.data.clone();
        let mut means = Vec::with_capacity(self.n_rows());
        for row in data.chunks_exact_mut(self.n_t) {
            let mean = row.iter().sum::<f64>() / self.n_t as f64;
            row.iter_mut().for_each(|v| *v -= mean);
            means.push(mean);
        }
        Ok(PixelMatrix {
            data,
            centered: true,
            mean_frame: Some(means),
            ..self.clone_shape()
        })
    }

    /// Adds the stored means back; the inverse of [`center`](Self::center).
    pub fn uncenter(&self) -> Result<PixelMatrix> {
        let means = match (&self.mean_frame, self.centered) {
            (Some(m), true) => m,
            _ => return Err(DataError::NotCentered),
        };
        let mut data = self.data.clone();
        for (row, mean) in data.chunks_exact_mut(self.n_t).zip(means) {
            row.iter_mut().for_each(|v| *v += mean);
        }
        Ok(PixelMatrix {
            data,
            ..self.clone_shape()
        })
    }

    /// Replaces the row values while keeping shape, centering flag and means.
    pub fn with_rows(&self, data: Vec<f64>) -> Result<PixelMatrix> {
        if data.len() != self.data.len() {
            return Err(DataError::SizeMismatch {
                expected: self.data.len(),
                found: data.len(),
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(DataError::NonFinite(i));
        }
        Ok(PixelMatrix {
            data,
            centered: self.centered,
            mean_frame: self.mean_frame.clone(),
            ..self.clone_shape()
        })
    }

    /// Keeps the listed rows, in order. Used for training subsets.
    pub fn select_rows(&self, rows: &[usize]) -> PixelMatrix {
        let mut data = Vec::with_capacity(rows.len() * self.n_t);
        for &p in rows {
            data.extend_from_slice(self.row(p));
        }
        let mean_frame = self
            .mean_frame
            .as_ref()
            .map(|m| rows.iter().map(|&p| m[p]).collect());
        PixelMatrix {
            n_y: 1,
            n_x: rows.len(),
            n_t: self.n_t,
            dt: self.dt,
            data,
            centered: self.centered,
            mean_frame,
        }
    }

    fn clone_shape(&self) -> PixelMatrix {
        PixelMatrix {
            n_y: self.n_y,
            n_x: self.n_x,
            n_t: self.n_t,
            dt: self.dt,
            data: Vec::new(),
            centered: false,
            mean_frame: None,
        }
    }
}

/// Flattens frames into per-pixel rows in raster order.
pub fn reshape_raster(seq: &ThermogramSequence) -> PixelMatrix {
    let (n_t, n_pix) = (seq.n_t, seq.n_pixels());
    let mut data = vec![0.0; n_t * n_pix];
    for k in 0..n_t {
        for (p, &v) in seq.frame(k).iter().enumerate() {
            data[p * n_t + k] = v;
        }
    }
    PixelMatrix {
        n_y: seq.n_y,
        n_x: seq.n_x,
        n_t,
        dt: seq.dt,
        data,
        centered: false,
        mean_frame: None,
    }
}

/// Inverse of [`reshape_raster`]. A centered matrix is uncentered first so the
/// frames carry the original offsets.
pub fn unraster(pm: &PixelMatrix) -> Result<ThermogramSequence> {
    let restored;
    let pm = if pm.centered {
        restored = pm.uncenter()?;
        &restored
    } else {
        pm
    };
    let (n_t, n_pix) = (pm.n_t, pm.n_rows());
    let mut frames = vec![0.0; n_t * n_pix];
    for (p, row) in pm.rows().enumerate() {
        for (k, &v) in row.iter().enumerate() {
            frames[k * n_pix + p] = v;
        }
    }
    ThermogramSequence::new(n_t, pm.n_y, pm.n_x, pm.dt, frames)
}
