use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::Vector3;

use super::{GeometryError, Result};

/// Triangle mesh with a derived, deduplicated edge set.
#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    vertices: Vec<Vector3<f64>>,
    faces: Vec<[usize; 3]>,
    edges: Vec<[usize; 2]>,
}

impl Mesh {
    pub fn new(vertices: Vec<Vector3<f64>>, faces: Vec<[usize; 3]>) -> Result<Self> {
        if vertices.len() < 4 {
            return Err(GeometryError::InvalidMesh(format!(
                "need at least 4 vertices, got {}",
                vertices.len()
            )));
        }
        if faces.is_empty() {
            return Err(GeometryError::InvalidMesh("mesh has no faces".into()));
        }
        if let Some((i, v)) = vertices
            .iter()
            .enumerate()
            .find(|(_, v)| !v.iter().all(|c| c.is_finite()))
        {
            return Err(GeometryError::InvalidMesh(format!("vertex {i} is not finite: {v:?}")));
        }
        let n = vertices.len();
        let mut edges = BTreeSet::new();
        for (fi, f) in faces.iter().enumerate() {
            if let Some(&bad) = f.iter().find(|&&i| i >= n) {
                return Err(GeometryError::InvalidMesh(format!(
                    "face {fi} references vertex {bad} but the mesh has {n} vertices"
                )));
            }
            for k in 0..3 {
                let (a, b) = (f[k], f[(k + 1) % 3]);
                if a != b {
                    edges.insert([a.min(b), a.max(b)]);
                }
            }
        }
        Ok(Self {
            vertices,
            faces,
            edges: edges.into_iter().collect(),
        })
    }

    pub fn vertices(&self) -> &[Vector3<f64>] {
        &self.vertices
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    pub fn edges(&self) -> &[[usize; 2]] {
        &self.edges
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    /// Radius of the smallest origin-centered sphere containing every vertex.
    pub fn bounding_radius(&self) -> f64 {
        self.vertices.iter().map(|v| v.norm()).fold(0.0, f64::max)
    }

    /// Area-weighted unit vertex normals. Windings are taken as outward unless
    /// the enclosed signed volume is negative, in which case all are flipped.
    /// Vertices touching only degenerate faces get a zero normal.
    pub fn vertex_normals(&self) -> Vec<Vector3<f64>> {
        let mut normals = vec![Vector3::zeros(); self.vertices.len()];
        let mut volume = 0.0;
        for f in &self.faces {
            let [a, b, c] = f.map(|i| self.vertices[i]);
            let n = (b - a).cross(&(c - a));
            volume += a.dot(&b.cross(&c));
            for &i in f {
                normals[i] += n;
            }
        }
        let sign = if volume < 0.0 { -1.0 } else { 1.0 };
        for n in &mut normals {
            let len = n.norm();
            *n = if len > 0.0 { *n * (sign / len) } else { Vector3::zeros() };
        }
        normals
    }

    /// Same mesh with vertex `i` moved to position `perm[i]` (faces relabeled).
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let n = self.vertices.len();
        if perm.len() != n {
            return Err(GeometryError::InvalidMesh("permutation length mismatch".into()));
        }
        let mut vertices = vec![Vector3::zeros(); n];
        for (old, &new) in perm.iter().enumerate() {
            vertices[new] = self.vertices[old];
        }
        let faces = self
            .faces
            .iter()
            .map(|f| [perm[f[0]], perm[f[1]], perm[f[2]]])
            .collect();
        Self::new(vertices, faces)
    }

    /// Closed, axis-aligned cuboid surface centered at the origin.
    ///
    /// `dims` are the side lengths along x, y, z and `segments` the number of
    /// grid subdivisions along each axis. Vertices are ordered lexicographically
    /// by their lattice coordinates, so the layout is deterministic.
    pub fn cuboid(dims: [f64; 3], segments: [usize; 3]) -> Result<Self> {
        if dims.iter().any(|d| !(d.is_finite() && *d > 0.0)) {
            return Err(GeometryError::InvalidMesh(format!("bad cuboid dims {dims:?}")));
        }
        if segments.contains(&0) {
            return Err(GeometryError::InvalidMesh("cuboid segments must be >= 1".into()));
        }
        let [nx, ny, nz] = segments;
        let on_surface = |i: usize, j: usize, k: usize| i == 0 || i == nx || j == 0 || j == ny || k == 0 || k == nz;

        let mut index = BTreeMap::new();
        let mut vertices = Vec::new();
        for i in 0..=nx {
            for j in 0..=ny {
                for k in 0..=nz {
                    if on_surface(i, j, k) {
                        index.insert((i, j, k), vertices.len());
                        vertices.push(Vector3::new(
                            dims[0] * (i as f64 / nx as f64 - 0.5),
                            dims[1] * (j as f64 / ny as f64 - 0.5),
                            dims[2] * (k as f64 / nz as f64 - 0.5),
                        ));
                    }
                }
            }
        }

        let mut faces = Vec::new();
        // Each box face is a grid over two free axes at a fixed value of the third.
        // `lattice(a, b)` maps grid coords on that face to lattice coordinates.
        let mut add_grid =
            |na: usize, nb: usize, flip: bool, lattice: &dyn Fn(usize, usize) -> (usize, usize, usize)| {
                for a in 0..na {
                    for b in 0..nb {
                        let q = [
                            index[&lattice(a, b)],
                            index[&lattice(a + 1, b)],
                            index[&lattice(a + 1, b + 1)],
                            index[&lattice(a, b + 1)],
                        ];
                        if flip {
                            faces.push([q[0], q[2], q[1]]);
                            faces.push([q[0], q[3], q[2]]);
                        } else {
                            faces.push([q[0], q[1], q[2]]);
                            faces.push([q[0], q[2], q[3]]);
                        }
                    }
                }
            };
        // Windings are chosen so that normals point outward.
        add_grid(ny, nz, true, &|a, b| (0, a, b));
        add_grid(ny, nz, false, &|a, b| (nx, a, b));
        add_grid(nx, nz, false, &|a, b| (a, 0, b));
        add_grid(nx, nz, true, &|a, b| (a, ny, b));
        add_grid(nx, ny, true, &|a, b| (a, b, 0));
        add_grid(nx, ny, false, &|a, b| (a, b, nz));
        Self::new(vertices, faces)
    }

    /// Default car-category template: a 2.0 x 0.7 x 0.9 cuboid, 490 vertices.
    pub fn car_template() -> Self {
        Self::cuboid([2.0, 0.7, 0.9], [14, 6, 8]).expect("static template is valid")
    }

    /// Parses the `v x y z` / `f i j k` text format (1-based face indices).
    /// Blank lines and `#` comments are allowed; any other line is an error.
    pub fn parse_text(text: &str) -> Result<Self> {
        let mut vertices = Vec::new();
        let mut faces = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = lineno + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let mut parts = trimmed.split_whitespace();
            let tag = parts.next().unwrap_or_default();
            let fields: Vec<&str> = parts.collect();
            let err = |message: String| GeometryError::Parse { line, message };
            match tag {
                "v" => {
                    if fields.len() != 3 {
                        return Err(err(format!("vertex needs 3 coordinates, got {}", fields.len())));
                    }
                    let mut c = [0.0; 3];
                    for (slot, s) in c.iter_mut().zip(&fields) {
                        *slot = s.parse().map_err(|_| err(format!("bad coordinate {s:?}")))?;
                    }
                    vertices.push(Vector3::new(c[0], c[1], c[2]));
                }
                "f" => {
                    if fields.len() != 3 {
                        return Err(err(format!("face needs 3 indices, got {}", fields.len())));
                    }
                    let mut f = [0usize; 3];
                    for (slot, s) in f.iter_mut().zip(&fields) {
                        let i: usize = s.parse().map_err(|_| err(format!("bad face index {s:?}")))?;
                        if i == 0 {
                            return Err(err("face indices are 1-based".into()));
                        }
                        *slot = i - 1;
                    }
                    faces.push(f);
                }
                other => return Err(err(format!("unsupported line type {other:?}"))),
            }
        }
        Self::new(vertices, faces)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for v in &self.vertices {
            let _ = writeln!(out, "v {} {} {}", v.x, v.y, v.z);
        }
        for f in &self.faces {
            let _ = writeln!(out, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
        }
        out
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse_text(&std::fs::read_to_string(path)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}
