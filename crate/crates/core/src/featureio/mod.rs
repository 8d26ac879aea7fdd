//! Feature maps, foreground masks and corpus manifests, with their on-disk
//! formats.
//!
//! `.fmap` layout (little-endian):
//!
//! ```text
//! offset  size  field
//! 0       4     magic "FMAP"
//! 4       2     format version (1)
//! 6       2     reserved (0)
//! 8       4     height H
//! 12      4     width W
//! 16      4     channels C
//! 20      4*HWC f32 payload, row-major, channel fastest
//! ```
//!
//! `.msk` layout: magic "MSK1", H u16, W u16, then H*W bytes (nonzero = foreground).

mod feature_map;
mod manifest;
mod mask;

pub use feature_map::{FeatureMap, FMAP_MAGIC, FMAP_VERSION, MAX_SIDE};
pub use manifest::{CorpusManifest, ManifestEntry};
pub use mask::{activation_mask, ForegroundMask, MASK_MAGIC};

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),
    #[error("{dim} = {value} exceeds the per-side limit of {MAX_SIDE}")]
    DimensionOverflow { dim: &'static str, value: u64 },
    #[error("{0} must be positive")]
    ZeroDimension(&'static str),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("{0} unexpected trailing bytes")]
    TrailingBytes(usize),
    #[error("non-finite value at cell ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("data length {found} does not match {height}x{width}x{channels}")]
    DataLength {
        height: usize,
        width: usize,
        channels: usize,
        found: usize,
    },
    #[error("shape mismatch: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("channel mismatch: expected {expected}, found {found}")]
    ChannelMismatch { expected: usize, found: usize },
    #[error("manifest {path:?} line {line}: {message}")]
    Manifest {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("I/O error on {}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl FormatError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, FormatError>;

/// Little-endian cursor over a byte slice.
pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(FormatError::Truncated {
                expected: self.pos.saturating_add(n),
                found: self.bytes.len(),
            }),
        }
    }

    pub(crate) fn magic(&mut self, expected: [u8; 4]) -> Result<()> {
        let found: [u8; 4] = match self.take(4) {
            Ok(s) => s.try_into().unwrap(),
            Err(_) => {
                let mut found = [0u8; 4];
                let rest = &self.bytes[self.pos..];
                found[..rest.len()].copy_from_slice(rest);
                found
            }
        };
        if found != expected {
            return Err(FormatError::BadMagic { expected, found });
        }
        Ok(())
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f32_vec(&mut self, count: usize) -> Result<Vec<f32>> {
        let n = count.checked_mul(4).ok_or(FormatError::Truncated {
            expected: usize::MAX,
            found: self.bytes.len(),
        })?;
        Ok(self
            .take(n)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub(crate) fn finish(&self) -> Result<()> {
        match self.remaining() {
            0 => Ok(()),
            n => Err(FormatError::TrailingBytes(n)),
        }
    }
}
