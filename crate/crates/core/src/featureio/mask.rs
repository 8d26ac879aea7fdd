use std::path::Path;

use super::{ByteReader, FeatureMap, FormatError, Result};

pub const MASK_MAGIC: [u8; 4] = *b"MSK1";

/// Binary foreground/background partition of a feature grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ForegroundMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl ForegroundMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(FormatError::ZeroDimension("mask side"));
        }
        for (dim, v) in [("mask height", height), ("mask width", width)] {
            if v > u16::MAX as usize {
                return Err(FormatError::DimensionOverflow { dim, value: v as u64 });
            }
        }
        if bits.len() != height * width {
            return Err(FormatError::ShapeMismatch {
                expected: (height, width),
                found: (bits.len() / width.max(1), width),
            });
        }
        Ok(Self { height, width, bits })
    }

    pub fn filled(height: usize, width: usize, value: bool) -> Self {
        Self::new(height, width, vec![value; height * width]).expect("valid dims")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.bits[row * self.width + col] = value;
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn foreground_count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Row-major `(row, col)` of every foreground cell.
    pub fn foreground_pixels(&self) -> Vec<(usize, usize)> {
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(|(i, _)| (i / self.width, i % self.width))
            .collect()
    }

    pub fn ensure_matches(&self, map: &FeatureMap) -> Result<()> {
        if self.shape() != map.shape() {
            return Err(FormatError::ShapeMismatch {
                expected: map.shape(),
                found: self.shape(),
            });
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + self.bits.len());
        out.extend_from_slice(&MASK_MAGIC);
        out.extend_from_slice(&(self.height as u16).to_le_bytes());
        out.extend_from_slice(&(self.width as u16).to_le_bytes());
        out.extend(self.bits.iter().map(|&b| b as u8));
        out
    }

    /// Parses a mask; any nonzero byte is foreground.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.magic(MASK_MAGIC)?;
        let (h, w) = (r.u16()? as usize, r.u16()? as usize);
        if h == 0 || w == 0 {
            return Err(FormatError::ZeroDimension("mask side"));
        }
        let bits = r.take(h * w)?.iter().map(|&b| b != 0).collect();
        r.finish()?;
        Self::new(h, w, bits)
    }

    /// Reads a mask and checks it against the expected grid shape.
    pub fn read(path: impl AsRef<Path>, height: usize, width: usize) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| FormatError::io(path, e))?;
        let mask = Self::from_bytes(&bytes)?;
        if mask.shape() != (height, width) {
            return Err(FormatError::ShapeMismatch {
                expected: (height, width),
                found: mask.shape(),
            });
        }
        Ok(mask)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| FormatError::io(path, e))
    }
}

/// Foreground estimate from feature activations alone.
///
/// A cell is foreground iff its best cosine similarity to any vertex feature
/// exceeds both its similarity to the background feature and `threshold`.
/// `vertex_features` is row-major N x C.
pub fn activation_mask(
    map: &FeatureMap,
    vertex_features: &[f32],
    background: &[f32],
    threshold: f64,
) -> Result<ForegroundMask> {
    let c = map.channels();
    if background.len() != c {
        return Err(FormatError::ChannelMismatch {
            expected: c,
            found: background.len(),
        });
    }
    if vertex_features.is_empty() || !vertex_features.len().is_multiple_of(c) {
        return Err(FormatError::ChannelMismatch {
            expected: c,
            found: vertex_features.len(),
        });
    }
    let dot = |a: &[f32], b: &[f32]| a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum::<f64>();
    let (h, w) = map.shape();
    let mut bits = Vec::with_capacity(h * w);
    for r in 0..h {
        for col in 0..w {
            let f = map.cell(r, col);
            let best = vertex_features
                .chunks_exact(c)
                .map(|v| dot(f, v))
                .fold(f64::NEG_INFINITY, f64::max);
            bits.push(best > dot(f, background).max(threshold));
        }
    }
    ForegroundMask::new(h, w, bits)
}
