use std::path::Path;

use super::{ByteReader, FormatError, Result};

pub const FMAP_MAGIC: [u8; 4] = *b"FMAP";
pub const FMAP_VERSION: u16 = 1;
/// Largest accepted height, width or channel count.
pub const MAX_SIDE: u64 = 1 << 16;

/// Cells whose norm is within this of 1 are left untouched at load.
const UNIT_SLACK: f64 = 1e-6;

/// Dense H x W x C grid of feature vectors; every nonzero cell has unit norm.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
    renormalized: bool,
}

impl FeatureMap {
    /// Builds a map and L2-normalizes every nonzero cell.
    pub fn new(height: usize, width: usize, channels: usize, mut data: Vec<f32>) -> Result<Self> {
        check_dims(height as u64, width as u64, channels as u64)?;
        if data.len() != height * width * channels {
            return Err(FormatError::DataLength {
                height,
                width,
                channels,
                found: data.len(),
            });
        }
        let mut renormalized = false;
        for (i, cell) in data.chunks_exact_mut(channels).enumerate() {
            if cell.iter().any(|v| !v.is_finite()) {
                return Err(FormatError::NonFinite {
                    row: i / width,
                    col: i % width,
                });
            }
            renormalized |= normalize_cell(cell);
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
            renormalized,
        })
    }

    /// Map filled from a per-cell generator; cells are normalized like [`FeatureMap::new`].
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize) -> Vec<f32>,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * channels);
        for r in 0..height {
            for c in 0..width {
                let cell = f(r, c);
                if cell.len() != channels {
                    return Err(FormatError::ChannelMismatch {
                        expected: channels,
                        found: cell.len(),
                    });
                }
                data.extend_from_slice(&cell);
            }
        }
        Self::new(height, width, channels, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn cell(&self, row: usize, col: usize) -> &[f32] {
        let i = (row * self.width + col) * self.channels;
        &self.data[i..i + self.channels]
    }

    /// Whether construction or loading had to rescale any cell.
    pub fn was_renormalized(&self) -> bool {
        self.renormalized
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(20 + 4 * self.data.len());
        out.extend_from_slice(&FMAP_MAGIC);
        out.extend_from_slice(&FMAP_VERSION.to_le_bytes());
        out.extend_from_slice(&0u16.to_le_bytes());
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        out.extend_from_slice(&(self.channels as u32).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.magic(FMAP_MAGIC)?;
        let version = r.u16()?;
        if version != FMAP_VERSION {
            return Err(FormatError::UnsupportedVersion(version));
        }
        let _reserved = r.u16()?;
        let (h, w, c) = (r.u32()? as u64, r.u32()? as u64, r.u32()? as u64);
        check_dims(h, w, c)?;
        let (h, w, c) = (h as usize, w as usize, c as usize);
        let data = r.f32_vec(h * w * c)?;
        r.finish()?;
        Self::new(h, w, c, data)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| FormatError::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| FormatError::io(path, e))
    }
}

fn check_dims(h: u64, w: u64, c: u64) -> Result<()> {
    for (dim, value) in [("height", h), ("width", w), ("channels", c)] {
        if value == 0 {
            return Err(FormatError::ZeroDimension(dim));
        }
        if value > MAX_SIDE {
            return Err(FormatError::DimensionOverflow { dim, value });
        }
    }
    Ok(())
}

/// Normalizes in place; returns true if any value changed.
fn normalize_cell(cell: &mut [f32]) -> bool {
    let norm = cell.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
    if norm == 0.0 || (norm - 1.0).abs() <= UNIT_SLACK {
        return false;
    }
    for v in cell.iter_mut() {
        *v = (*v as f64 / norm) as f32;
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unit_map(h: usize, w: usize, c: usize, seed: u32) -> FeatureMap {
        let mut state = seed.wrapping_mul(2654435761).wrapping_add(1);
        FeatureMap::from_fn(h, w, c, |_, _| {
            (0..c)
                .map(|_| {
                    state ^= state << 13;
                    state ^= state >> 17;
                    state ^= state << 5;
                    (state % 2000) as f32 / 1000.0 - 1.0
                })
                .collect()
        })
        .unwrap()
    }

    #[test]
    fn small_map_round_trips() {
        let m = unit_map(2, 2, 4, 7);
        let bytes = m.to_bytes();
        assert_eq!(bytes.len(), 20 + 4 * 16);
        let back = FeatureMap::from_bytes(&bytes).unwrap();
        assert!(!back.was_renormalized());
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn header_layout() {
        let m = unit_map(3, 5, 2, 1);
        let b = m.to_bytes();
        assert_eq!(&b[0..4], b"FMAP");
        assert_eq!(u16::from_le_bytes([b[4], b[5]]), 1);
        assert_eq!(u16::from_le_bytes([b[6], b[7]]), 0);
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(b[12..16].try_into().unwrap()), 5);
        assert_eq!(u32::from_le_bytes(b[16..20].try_into().unwrap()), 2);
    }

    #[test]
    fn normalizes_on_load() {
        let m = FeatureMap::new(1, 2, 4, vec![3.0, 4.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        assert!(m.was_renormalized());
        assert_eq!(m.cell(0, 0), &[0.6, 0.8, 0.0, 0.0]);
        // all-zero padding cell stays zero
        assert_eq!(m.cell(0, 1), &[0.0; 4]);
    }

    #[test]
    fn parse_errors_are_distinct() {
        let good = unit_map(2, 3, 4, 3).to_bytes();

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(matches!(
            FeatureMap::from_bytes(&bad_magic),
            Err(FormatError::BadMagic { .. })
        ));

        let mut too_big = good.clone();
        too_big[8..12].copy_from_slice(&(70_000u32).to_le_bytes());
        assert!(matches!(
            FeatureMap::from_bytes(&too_big),
            Err(FormatError::DimensionOverflow {
                dim: "height",
                value: 70_000
            })
        ));

        assert!(matches!(
            FeatureMap::from_bytes(&good[..good.len() - 3]),
            Err(FormatError::Truncated { .. })
        ));
        assert!(matches!(
            FeatureMap::from_bytes(&good[..2]),
            Err(FormatError::BadMagic { .. })
        ));

        let mut version = good.clone();
        version[4] = 9;
        assert!(matches!(
            FeatureMap::from_bytes(&version),
            Err(FormatError::UnsupportedVersion(9))
        ));

        let mut trailing = good;
        trailing.push(0);
        assert!(matches!(
            FeatureMap::from_bytes(&trailing),
            Err(FormatError::TrailingBytes(1))
        ));
    }

    proptest! {
        #[test]
        fn round_trip_is_byte_identical(
            h in 1usize..6, w in 1usize..6, c in 1usize..9, seed in any::<u32>()
        ) {
            let m = unit_map(h, w, c, seed);
            let bytes = m.to_bytes();
            let back = FeatureMap::from_bytes(&bytes).unwrap();
            prop_assert_eq!(back.to_bytes(), bytes);
        }

        #[test]
        fn loaded_cells_are_unit_or_zero(
            h in 1usize..5, w in 1usize..5, c in 1usize..9,
            vals in proptest::collection::vec(-100.0f32..100.0, 200)
        ) {
            let data: Vec<f32> = vals.iter().cycle().take(h * w * c).copied().collect();
            let m = FeatureMap::new(h, w, c, data).unwrap();
            for r in 0..h {
                for col in 0..w {
                    let n = m.cell(r, col).iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
                    prop_assert!(n == 0.0 || (n - 1.0).abs() < 1e-4);
                }
            }
        }
    }
}
