//! Binary containers for precomputed audio features (`DIMF`) and gesture clips (`DIMG`).
//!
//! Both share one layout: 4-byte magic, then little-endian `u32 version`, `u32 rows`,
//! `u32 cols`, `f32 rate_hz`, then `rows * cols` row-major `f32` values.

use std::fs;
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};

pub const FEATURE_MAGIC: &[u8; 4] = b"DIMF";
pub const GESTURE_MAGIC: &[u8; 4] = b"DIMG";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 20;

/// A rate-tagged `frames x dims` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSequence {
    pub data: Array2<f32>,
    pub rate_hz: f32,
}

impl FrameSequence {
    pub fn new(data: Array2<f32>, rate_hz: f32) -> Self {
        FrameSequence { data, rate_hz }
    }

    pub fn frames(&self) -> usize {
        self.data.nrows()
    }

    pub fn dims(&self) -> usize {
        self.data.ncols()
    }

    pub fn to_bytes(&self, magic: &[u8; 4]) -> Vec<u8> {
        let (rows, cols) = self.data.dim();
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * rows * cols);
        out.extend_from_slice(magic);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(rows as u32).to_le_bytes());
        out.extend_from_slice(&(cols as u32).to_le_bytes());
        out.extend_from_slice(&self.rate_hz.to_le_bytes());
        for v in self.data.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], magic: &[u8; 4]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Format(format!(
                "truncated header: {} bytes, need {HEADER_LEN}",
                bytes.len()
            )));
        }
        if &bytes[..4] != magic {
            return Err(Error::Format(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&bytes[..4]),
                String::from_utf8_lossy(magic)
            )));
        }
        let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        let version = u32_at(4);
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let (rows, cols) = (u32_at(8) as usize, u32_at(12) as usize);
        let rate_hz = f32::from_le_bytes(bytes[16..20].try_into().unwrap());
        let expected = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Format("header dimensions overflow".into()))?;
        let payload = &bytes[HEADER_LEN..];
        if payload.len() != expected {
            return Err(Error::Format(format!(
                "payload is {} bytes, header {rows}x{cols} needs {expected}",
                payload.len()
            )));
        }
        if !(rate_hz.is_finite() && rate_hz > 0.0) {
            return Err(Error::Format(format!("invalid frame rate {rate_hz}")));
        }
        let values = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let data = Array2::from_shape_vec((rows, cols), values).map_err(|e| Error::Format(e.to_string()))?;
        Ok(FrameSequence { data, rate_hz })
    }

    pub fn read(path: impl AsRef<Path>, magic: &[u8; 4]) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::from(e).in_file(path))?;
        Self::from_bytes(&bytes, magic).map_err(|e| e.in_file(path))
    }

    pub fn write(&self, path: impl AsRef<Path>, magic: &[u8; 4]) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes(magic)).map_err(|e| Error::from(e).in_file(path))
    }
}

pub fn read_features(path: impl AsRef<Path>) -> Result<FrameSequence> {
    FrameSequence::read(path, FEATURE_MAGIC)
}

pub fn write_features(path: impl AsRef<Path>, seq: &FrameSequence) -> Result<()> {
    seq.write(path, FEATURE_MAGIC)
}

pub fn read_gesture(path: impl AsRef<Path>) -> Result<FrameSequence> {
    FrameSequence::read(path, GESTURE_MAGIC)
}

pub fn write_gesture(path: impl AsRef<Path>, seq: &FrameSequence) -> Result<()> {
    seq.write(path, GESTURE_MAGIC)
}

/// Validates a feature file and, when given, its expected width. Returns the parsed sequence.
pub fn check_features(path: impl AsRef<Path>, expected_dims: Option<usize>) -> Result<FrameSequence> {
    let path = path.as_ref();
    let seq = read_features(path)?;
    if let Some(d) = expected_dims {
        if seq.dims() != d {
            return Err(Error::Format(format!("feature width {} != expected {d}", seq.dims())).in_file(path));
        }
    }
    if seq.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Format("non-finite feature value".into()).in_file(path));
    }
    Ok(seq)
}
