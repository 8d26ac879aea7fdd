use std::path::Path;

use nalgebra::Vector3;
use rand::Rng;
use rand_distr::StandardNormal;

use super::{RenderError, Result};
use crate::featureio::ByteReader;
use crate::geometry::Mesh;
use crate::kernel::normalize;

pub const DEFAULT_TEMPERATURE: f64 = 0.07;
pub const DEFAULT_MOMENTUM: f64 = 0.9;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"NMSH";
pub const CHECKPOINT_VERSION: u16 = 1;

const UNIT_TOLERANCE: f64 = 1e-6;

/// Template mesh with one unit feature per vertex plus a background feature.
///
/// Checkpoint layout (little-endian): magic "NMSH", version u16, reserved
/// u16, N u32, c u32, temperature f64, momentum f64, `(N + 1) * c` f32
/// features with the background last, then a u64 byte length followed by the
/// mesh in its text format.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuralMesh {
    mesh: Mesh,
    channels: usize,
    features: Vec<f32>,
    background: Vec<f32>,
    temperature: f64,
    momentum: f64,
    normals: Vec<Vector3<f64>>,
}

impl NeuralMesh {
    pub fn new(
        mesh: Mesh,
        channels: usize,
        features: Vec<f32>,
        background: Vec<f32>,
        temperature: f64,
        momentum: f64,
    ) -> Result<Self> {
        if channels == 0 {
            return Err(RenderError::InvalidParameter("channels must be positive".into()));
        }
        if features.len() != mesh.num_vertices() * channels {
            return Err(RenderError::ChannelMismatch {
                expected: mesh.num_vertices() * channels,
                found: features.len(),
            });
        }
        if background.len() != channels {
            return Err(RenderError::ChannelMismatch {
                expected: channels,
                found: background.len(),
            });
        }
        check_hyper(temperature, momentum)?;
        let nm = Self {
            normals: mesh.vertex_normals(),
            mesh,
            channels,
            features,
            background,
            temperature,
            momentum,
        };
        nm.check_unit()?;
        Ok(nm)
    }

    /// Gaussian features projected to the unit sphere.
    pub fn random(mesh: Mesh, channels: usize, rng: &mut impl Rng, temperature: f64, momentum: f64) -> Result<Self> {
        let n = mesh.num_vertices();
        let mut draw = |len: usize| -> Vec<f32> {
            let mut v: Vec<f32> = (0..len).map(|_| rng.sample::<f64, _>(StandardNormal) as f32).collect();
            for cell in v.chunks_exact_mut(channels.max(1)) {
                normalize(cell);
            }
            v
        };
        let features = draw(n * channels);
        let background = draw(channels);
        Self::new(mesh, channels, features, background, temperature, momentum)
    }

    pub fn mesh(&self) -> &Mesh {
        &self.mesh
    }

    pub(crate) fn normals(&self) -> &[Vector3<f64>] {
        &self.normals
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn num_vertices(&self) -> usize {
        self.mesh.num_vertices()
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn set_temperature(&mut self, t: f64) -> Result<()> {
        check_hyper(t, self.momentum)?;
        self.temperature = t;
        Ok(())
    }

    pub fn set_momentum(&mut self, m: f64) -> Result<()> {
        check_hyper(self.temperature, m)?;
        self.momentum = m;
        Ok(())
    }

    /// Row-major `N x c` vertex features.
    pub fn features(&self) -> &[f32] {
        &self.features
    }

    pub fn vertex_feature(&self, v: usize) -> &[f32] {
        &self.features[v * self.channels..(v + 1) * self.channels]
    }

    pub fn background(&self) -> &[f32] {
        &self.background
    }

    pub(crate) fn features_mut(&mut self) -> (&mut [f32], &mut [f32]) {
        (&mut self.features, &mut self.background)
    }

    /// Same model with vertex `i` moved to index `perm[i]`, as [`Mesh::permuted`].
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let mesh = self.mesh.permuted(perm)?;
        let c = self.channels;
        let mut features = vec![0.0; self.features.len()];
        for (old, &new) in perm.iter().enumerate() {
            features[new * c..(new + 1) * c].copy_from_slice(&self.features[old * c..(old + 1) * c]);
        }
        Self::new(
            mesh,
            c,
            features,
            self.background.clone(),
            self.temperature,
            self.momentum,
        )
    }

    pub(crate) fn check_unit(&self) -> Result<()> {
        let c = self.channels;
        for (i, f) in self
            .features
            .chunks_exact(c)
            .chain(std::iter::once(&self.background[..]))
            .enumerate()
        {
            let n = f.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
            if (n - 1.0).abs() > UNIT_TOLERANCE {
                return Err(RenderError::NotUnit(i));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let text = self.mesh.to_text();
        let mut out = Vec::with_capacity(32 + 4 * (self.features.len() + self.channels) + 8 + text.len());
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&0u16.to_le_bytes());
        out.extend_from_slice(&(self.num_vertices() as u32).to_le_bytes());
        out.extend_from_slice(&(self.channels as u32).to_le_bytes());
        out.extend_from_slice(&self.temperature.to_le_bytes());
        out.extend_from_slice(&self.momentum.to_le_bytes());
        for v in self.features.iter().chain(&self.background) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(text.len() as u64).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.magic(CHECKPOINT_MAGIC)?;
        let version = r.u16()?;
        if version != CHECKPOINT_VERSION {
            return Err(RenderError::Checkpoint(format!("unsupported version {version}")));
        }
        let _reserved = r.u16()?;
        let n = r.u32()? as usize;
        let c = r.u32()? as usize;
        let temperature = r.f64()?;
        let momentum = r.f64()?;
        let count = n
            .checked_add(1)
            .and_then(|k| k.checked_mul(c))
            .ok_or_else(|| RenderError::Checkpoint("feature block size overflows".into()))?;
        let mut features = r.f32_vec(count)?;
        let background = features.split_off(n * c);
        let len = r.u64()? as usize;
        let text = std::str::from_utf8(r.take(len)?)
            .map_err(|e| RenderError::Checkpoint(format!("mesh text is not UTF-8: {e}")))?;
        r.finish()?;
        let mesh = Mesh::parse_text(text)?;
        if mesh.num_vertices() != n {
            return Err(RenderError::Checkpoint(format!(
                "header says {n} vertices, mesh has {}",
                mesh.num_vertices()
            )));
        }
        Self::new(mesh, c, features, background, temperature, momentum)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|source| RenderError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|source| RenderError::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

fn check_hyper(temperature: f64, momentum: f64) -> Result<()> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(RenderError::InvalidParameter(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    if !(0.0..=1.0).contains(&momentum) {
        return Err(RenderError::InvalidParameter(format!(
            "momentum must lie in [0, 1], got {momentum}"
        )));
    }
    Ok(())
}
