use std::ops::Range;

use rayon::prelude::*;

use super::{CorrespondenceError, Result};
use crate::featureio::FeatureMap;
use crate::geometry::{rasterize_visibility, Camera, Mesh, Pose, VisibilityRecord};

#[derive(Debug, Clone, PartialEq)]
pub struct BankView {
    pub pose: Pose,
    pub visibility: VisibilityRecord,
}

/// Per-vertex features collected from template renderings at known views.
///
/// Entries are stored flat, grouped by vertex and ordered by view within a
/// vertex, so matching is a scan over one contiguous matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewBank {
    views: Vec<BankView>,
    channels: usize,
    num_vertices: usize,
    entries: Vec<f32>,
    entry_vertex: Vec<u32>,
    entry_view: Vec<u32>,
    vertex_ranges: Vec<Range<usize>>,
}

impl ViewBank {
    pub fn views(&self) -> &[BankView] {
        &self.views
    }

    pub fn num_views(&self) -> usize {
        self.views.len()
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn num_vertices(&self) -> usize {
        self.num_vertices
    }

    pub fn num_entries(&self) -> usize {
        self.entry_view.len()
    }

    /// Row-major `entries x channels` feature matrix.
    pub fn entries(&self) -> &[f32] {
        &self.entries
    }

    pub fn entry_vertex(&self) -> &[u32] {
        &self.entry_vertex
    }

    pub fn entry_view(&self) -> &[u32] {
        &self.entry_view
    }

    /// `(view, feature)` pairs stored for `vertex`, by ascending view.
    pub fn vertex_features(&self, vertex: usize) -> impl Iterator<Item = (usize, &[f32])> + '_ {
        let c = self.channels;
        self.vertex_ranges[vertex]
            .clone()
            .map(move |e| (self.entry_view[e] as usize, &self.entries[e * c..(e + 1) * c]))
    }

    pub fn entry_count(&self, vertex: usize) -> usize {
        self.vertex_ranges[vertex].len()
    }

    pub(crate) fn vertex_range(&self, vertex: usize) -> Range<usize> {
        self.vertex_ranges[vertex].clone()
    }

    pub fn is_visible(&self, view: usize, vertex: usize) -> bool {
        self.views[view].visibility.visible[vertex]
    }
}

/// Builds the bank from one rendered feature map per view pose.
///
/// Each visible vertex samples the nearest cell it owns in the rendered
/// footprint: the cell its projection falls in when that cell is assigned to
/// it, otherwise the closest such cell in the surrounding 5x5 block. Vertices
/// owning no nearby cell, and all-zero (padding) cells, are not stored.
pub fn build_view_bank(mesh: &Mesh, maps: &[FeatureMap], poses: &[Pose], camera: &Camera) -> Result<ViewBank> {
    if maps.len() != poses.len() {
        return Err(CorrespondenceError::ViewCountMismatch {
            maps: maps.len(),
            poses: poses.len(),
        });
    }
    if maps.is_empty() {
        return Err(CorrespondenceError::NoViews);
    }
    let c = maps[0].channels();
    for m in maps {
        if m.channels() != c {
            return Err(CorrespondenceError::ChannelMismatch {
                expected: c,
                found: m.channels(),
            });
        }
        if m.shape() != camera.image_size {
            return Err(CorrespondenceError::ShapeMismatch {
                expected: camera.image_size,
                found: m.shape(),
            });
        }
    }
    for i in 0..poses.len() {
        for j in 0..i {
            if poses[i] == poses[j] {
                return Err(CorrespondenceError::DuplicateView(j, i));
            }
        }
    }

    let views: Vec<BankView> = poses
        .par_iter()
        .map(|p| {
            Ok(BankView {
                pose: *p,
                visibility: rasterize_visibility(mesh, p, camera)?,
            })
        })
        .collect::<Result<_>>()?;

    let n = mesh.num_vertices();
    let mut per_view_count = vec![0usize; views.len()];
    let mut entries = Vec::new();
    let mut entry_vertex = Vec::new();
    let mut entry_view = Vec::new();
    let mut vertex_ranges = Vec::with_capacity(n);
    for vertex in 0..n {
        let start = entry_view.len();
        for (vi, view) in views.iter().enumerate() {
            if !view.visibility.visible[vertex] {
                continue;
            }
            let Some((row, col)) = owned_cell(view, vertex, camera) else {
                continue;
            };
            let cell = maps[vi].cell(row, col);
            if cell.iter().all(|&x| x == 0.0) {
                continue;
            }
            entries.extend_from_slice(cell);
            entry_vertex.push(vertex as u32);
            entry_view.push(vi as u32);
            per_view_count[vi] += 1;
        }
        vertex_ranges.push(start..entry_view.len());
    }
    if let Some(v) = per_view_count.iter().position(|&k| k == 0) {
        return Err(CorrespondenceError::EmptyView(v));
    }

    Ok(ViewBank {
        views,
        channels: c,
        num_vertices: n,
        entries,
        entry_vertex,
        entry_view,
        vertex_ranges,
    })
}

/// Search radius, in cells, for a vertex whose own cell is assigned elsewhere.
const OWNED_CELL_RADIUS: usize = 2;

fn owned_cell(view: &BankView, vertex: usize, camera: &Camera) -> Option<(usize, usize)> {
    let p = view.visibility.projected[vertex];
    let (row, col) = camera.pixel_of(p.u, p.v)?;
    let fp = view.visibility.footprint.as_ref()?;
    if fp.vertex_at(row, col) == Some(vertex) {
        return Some((row, col));
    }
    let (h, w) = camera.image_size;
    let mut best: Option<(f64, usize, usize)> = None;
    for r in row.saturating_sub(OWNED_CELL_RADIUS)..=(row + OWNED_CELL_RADIUS).min(h - 1) {
        for c in col.saturating_sub(OWNED_CELL_RADIUS)..=(col + OWNED_CELL_RADIUS).min(w - 1) {
            if fp.vertex_at(r, c) != Some(vertex) {
                continue;
            }
            let d = (c as f64 + 0.5 - p.u).powi(2) + (r as f64 + 0.5 - p.v).powi(2);
            if best.is_none_or(|(bd, _, _)| d < bd) {
                best = Some((d, r, c));
            }
        }
    }
    best.map(|(_, r, c)| (r, c))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;

    fn triangle() -> Mesh {
        Mesh::new(
            vec![
                Vector3::new(-1.0, -1.0, 0.0),
                Vector3::new(1.0, -1.0, 0.0),
                Vector3::new(0.0, 1.0, 0.0),
                // unused vertex far outside the image
                Vector3::new(50.0, 50.0, 0.0),
            ],
            vec![[0, 1, 2]],
        )
        .unwrap()
    }

    fn constant_map(h: usize, w: usize, c: usize) -> FeatureMap {
        FeatureMap::from_fn(h, w, c, |r, col| {
            let mut v = vec![0.0; c];
            v[(r + col) % c] = 1.0;
            v
        })
        .unwrap()
    }

    #[test]
    fn single_view_triangle() {
        let mesh = triangle();
        let cam = Camera::centered(20.0, 32, 32).unwrap();
        let pose = Pose::new(0.0, 0.0, 0.0, 4.0).unwrap();
        let bank = build_view_bank(&mesh, &[constant_map(32, 32, 4)], &[pose], &cam).unwrap();
        assert_eq!(bank.num_entries(), 3);
        for v in 0..3 {
            assert_eq!(bank.entry_count(v), 1);
        }
        assert_eq!(bank.num_views(), 1);
        for (_, f) in bank.vertex_features(0) {
            let n: f32 = f.iter().map(|x| x * x).sum();
            assert!((n - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn cube_front_and_back_cover_every_vertex() {
        let mesh = Mesh::cuboid([1.0, 1.0, 1.0], [1, 1, 1]).unwrap();
        let cam = Camera::centered(60.0, 48, 48).unwrap();
        let poses = [
            Pose::new(0.0, 0.0, 0.0, 5.0).unwrap(),
            Pose::new(std::f64::consts::PI, 0.0, 0.0, 5.0).unwrap(),
        ];
        let maps = [constant_map(48, 48, 8), constant_map(48, 48, 8)];
        let bank = build_view_bank(&mesh, &maps, &poses, &cam).unwrap();
        for v in 0..8 {
            let expected = bank.views().iter().filter(|bv| bv.visibility.visible[v]).count();
            assert!(expected >= 1);
            assert_eq!(bank.entry_count(v), expected);
            for (view, _) in bank.vertex_features(v) {
                assert!(bank.is_visible(view, v));
            }
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let mesh = triangle();
        let cam = Camera::centered(20.0, 32, 32).unwrap();
        let pose = Pose::new(0.0, 0.0, 0.0, 4.0).unwrap();
        let m4 = constant_map(32, 32, 4);
        let m5 = constant_map(32, 32, 5);
        assert!(matches!(
            build_view_bank(
                &mesh,
                &[m4.clone(), m5],
                &[pose, Pose::new(0.1, 0.0, 0.0, 4.0).unwrap()],
                &cam
            ),
            Err(CorrespondenceError::ChannelMismatch { .. })
        ));
        assert!(matches!(
            build_view_bank(&mesh, &[m4.clone(), m4.clone()], &[pose, pose], &cam),
            Err(CorrespondenceError::DuplicateView(0, 1))
        ));
        assert!(matches!(
            build_view_bank(&mesh, std::slice::from_ref(&m4), &[pose, pose], &cam),
            Err(CorrespondenceError::ViewCountMismatch { .. })
        ));
        assert!(matches!(
            build_view_bank(&mesh, &[constant_map(16, 16, 4)], &[pose], &cam),
            Err(CorrespondenceError::ShapeMismatch { .. })
        ));
        let zero = FeatureMap::new(32, 32, 4, vec![0.0; 32 * 32 * 4]).unwrap();
        assert!(matches!(
            build_view_bank(&mesh, &[zero], &[pose], &cam),
            Err(CorrespondenceError::EmptyView(0))
        ));
    }
}
