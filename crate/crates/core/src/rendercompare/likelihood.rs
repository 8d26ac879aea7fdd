use nalgebra::{Matrix3, Vector3};

use super::{NeuralMesh, RenderError, Result};
use crate::featureio::{FeatureMap, ForegroundMask};
use crate::geometry::{camera_points, rasterize_visibility, Camera, Footprint, Pose, VisibilityRecord};
use crate::kernel::dot64;

/// Soft vertex-to-pixel assignment used by the smoothed objective.
///
/// A visible vertex at squared distance `d2` from a pixel center gets weight
/// `s * exp(-d2 / (2 b^2)) * (1 - (d2 / R^2)^2)^2` inside radius `R` and zero
/// outside, where `s = max(0, n . view)` is how squarely its normal faces the
/// camera. The background feature always takes weight `exp(background_logit)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SoftKernel {
    pub radius: f64,
    pub bandwidth: f64,
    pub background_logit: f64,
}

impl Default for SoftKernel {
    fn default() -> Self {
        Self {
            radius: 2.0,
            bandwidth: 1.0,
            background_logit: -2.0,
        }
    }
}

impl SoftKernel {
    fn validate(&self) -> Result<()> {
        if !(self.radius > 0.0 && self.bandwidth > 0.0 && self.background_logit.is_finite()) {
            return Err(RenderError::InvalidParameter(format!("bad soft kernel {self:?}")));
        }
        Ok(())
    }

    /// Radial weight and its derivative with respect to `d2`.
    #[inline]
    fn weight(&self, d2: f64) -> (f64, f64) {
        let r2 = self.radius * self.radius;
        if d2 >= r2 {
            return (0.0, 0.0);
        }
        let b2 = self.bandwidth * self.bandwidth;
        let e = (-d2 / (2.0 * b2)).exp();
        let w = d2 / r2;
        let t = 1.0 - w * w;
        let u = e * t * t;
        let du = -u / (2.0 * b2) + e * 2.0 * t * (-2.0 * w) / r2;
        (u, du)
    }
}

/// Hard and smoothed objective at one pose, with the smoothed gradient
/// ordered (azimuth, elevation, theta, distance).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub hard: f64,
    pub smooth: f64,
    pub gradient: [f64; 4],
}

pub(super) fn check_inputs(image: &FeatureMap, nm: &NeuralMesh, camera: &Camera, mask: &ForegroundMask) -> Result<()> {
    if image.channels() != nm.channels() {
        return Err(RenderError::ChannelMismatch {
            expected: nm.channels(),
            found: image.channels(),
        });
    }
    if image.shape() != camera.image_size {
        return Err(RenderError::ShapeMismatch {
            expected: camera.image_size,
            found: image.shape(),
        });
    }
    if mask.shape() != image.shape() {
        return Err(RenderError::ShapeMismatch {
            expected: image.shape(),
            found: mask.shape(),
        });
    }
    Ok(())
}

fn footprint(rec: &VisibilityRecord) -> &Footprint {
    rec.footprint
        .as_ref()
        .expect("rasterize_visibility always sets the footprint")
}

pub(crate) fn hard_from_footprint(image: &FeatureMap, nm: &NeuralMesh, mask: &ForegroundMask, fp: &Footprint) -> f64 {
    let (h, w) = image.shape();
    let mut total = 0.0;
    for row in 0..h {
        for col in 0..w {
            let f = image.cell(row, col);
            let c = match fp.vertex_at(row, col) {
                Some(v) if mask.get(row, col) => nm.vertex_feature(v),
                _ => nm.background(),
            };
            total += dot64(f, c);
        }
    }
    -total / nm.temperature()
}

/// Negative log-likelihood of `image` under the hard rasterized assignment.
///
/// Mask-foreground pixels covered by the rendered silhouette score against
/// their footprint vertex; every other pixel scores against the background.
pub fn nll(image: &FeatureMap, nm: &NeuralMesh, pose: &Pose, camera: &Camera, mask: &ForegroundMask) -> Result<f64> {
    check_inputs(image, nm, camera, mask)?;
    let rec = rasterize_visibility(nm.mesh(), pose, camera)?;
    Ok(hard_from_footprint(image, nm, mask, footprint(&rec)))
}

/// Smoothed negative log-likelihood with the default kernel.
pub fn smooth_nll(
    image: &FeatureMap,
    nm: &NeuralMesh,
    pose: &Pose,
    camera: &Camera,
    mask: &ForegroundMask,
) -> Result<f64> {
    Ok(evaluate(image, nm, pose, camera, mask, &SoftKernel::default())?.smooth)
}

/// Gradient of the smoothed objective with the default kernel, ordered
/// (azimuth, elevation, theta, distance).
pub fn nll_gradient(
    image: &FeatureMap,
    nm: &NeuralMesh,
    pose: &Pose,
    camera: &Camera,
    mask: &ForegroundMask,
) -> Result<[f64; 4]> {
    Ok(evaluate(image, nm, pose, camera, mask, &SoftKernel::default())?.gradient)
}

/// `n . view` per vertex, clamped at zero, for camera-frame positions `pts`.
fn facing(nm: &NeuralMesh, rot: &Matrix3<f64>, pts: &[Vector3<f64>]) -> Vec<f64> {
    nm.normals()
        .iter()
        .zip(pts)
        .map(|(n, p)| (-(rot * n).dot(p) / p.norm()).max(0.0))
        .collect()
}

/// Visible, camera-facing vertices bucketed by the pixel their projection falls in.
struct VertexGrid {
    start: Vec<u32>,
    items: Vec<u32>,
    width: usize,
    height: usize,
}

impl VertexGrid {
    fn new(rec: &VisibilityRecord, camera: &Camera, facing: &[f64]) -> Self {
        let (h, w) = camera.image_size;
        let cells: Vec<Option<usize>> = rec
            .projected
            .iter()
            .zip(&rec.visible)
            .zip(facing)
            .map(|((p, &vis), &s)| {
                if !vis || s <= 0.0 {
                    return None;
                }
                camera.pixel_of(p.u, p.v).map(|(r, c)| r * w + c)
            })
            .collect();
        let mut start = vec![0u32; h * w + 1];
        for c in cells.iter().flatten() {
            start[c + 1] += 1;
        }
        for i in 0..h * w {
            start[i + 1] += start[i];
        }
        let mut fill = start.clone();
        let mut items = vec![0u32; start[h * w] as usize];
        for (k, c) in cells.iter().enumerate() {
            if let Some(c) = c {
                items[fill[*c] as usize] = k as u32;
                fill[*c] += 1;
            }
        }
        Self {
            start,
            items,
            width: w,
            height: h,
        }
    }

    fn cell(&self, row: usize, col: usize) -> &[u32] {
        let i = row * self.width + col;
        &self.items[self.start[i] as usize..self.start[i + 1] as usize]
    }
}

struct Neighbor {
    vertex: usize,
    /// radial weight alone
    radial: f64,
    weight: f64,
    dweight: f64,
    du: f64,
    dv: f64,
}

/// Per-pixel soft blend: gathers nearby visible vertices, returns the blend
/// `g`, its normalizer and the neighbor list.
struct SoftPixel {
    neighbors: Vec<Neighbor>,
    g: Vec<f64>,
    z: f64,
}

impl SoftPixel {
    fn new(c: usize) -> Self {
        Self {
            neighbors: Vec::with_capacity(16),
            g: vec![0.0; c],
            z: 0.0,
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn blend(
        &mut self,
        row: usize,
        col: usize,
        grid: &VertexGrid,
        rec: &VisibilityRecord,
        facing: &[f64],
        nm: &NeuralMesh,
        kernel: &SoftKernel,
        bg_weight: f64,
    ) {
        let (x, y) = (col as f64 + 0.5, row as f64 + 0.5);
        let lo = (0.5 - kernel.radius).floor() as i64;
        let hi = (0.5 + kernel.radius).floor() as i64;
        self.neighbors.clear();
        for dr in lo..=hi {
            let r = row as i64 + dr;
            if r < 0 || r >= grid.height as i64 {
                continue;
            }
            for dc in lo..=hi {
                let cc = col as i64 + dc;
                if cc < 0 || cc >= grid.width as i64 {
                    continue;
                }
                for &k in grid.cell(r as usize, cc as usize) {
                    let p = rec.projected[k as usize];
                    let (du, dv) = (p.u - x, p.v - y);
                    let (radial, dradial) = kernel.weight(du * du + dv * dv);
                    if radial > 0.0 {
                        let s = facing[k as usize];
                        self.neighbors.push(Neighbor {
                            vertex: k as usize,
                            radial,
                            weight: radial * s,
                            dweight: dradial * s,
                            du,
                            dv,
                        });
                    }
                }
            }
        }
        self.z = bg_weight;
        for (gi, &b) in self.g.iter_mut().zip(nm.background()) {
            *gi = bg_weight * b as f64;
        }
        for n in &self.neighbors {
            self.z += n.weight;
            for (gi, &cv) in self.g.iter_mut().zip(nm.vertex_feature(n.vertex)) {
                *gi += n.weight * cv as f64;
            }
        }
        let inv = 1.0 / self.z;
        for gi in &mut self.g {
            *gi *= inv;
        }
    }
}

/// Hard objective plus smoothed objective and its analytic gradient.
pub fn evaluate(
    image: &FeatureMap,
    nm: &NeuralMesh,
    pose: &Pose,
    camera: &Camera,
    mask: &ForegroundMask,
    kernel: &SoftKernel,
) -> Result<Evaluation> {
    check_inputs(image, nm, camera, mask)?;
    kernel.validate()?;
    let rec = rasterize_visibility(nm.mesh(), pose, camera)?;
    let hard = hard_from_footprint(image, nm, mask, footprint(&rec));

    let c = nm.channels();
    let inv_t = 1.0 / nm.temperature();
    let bg_weight = kernel.background_logit.exp();
    let pts = camera_points(nm.mesh(), pose);
    let rot = pose.rotation();
    let facing = facing(nm, &rot, &pts);
    let grid = VertexGrid::new(&rec, camera, &facing);
    let mut px = SoftPixel::new(c);
    let mut q = vec![0.0f64; c];
    // dL/d(u, v) and dL/d(facing) per vertex
    let mut grad_uv = vec![(0.0f64, 0.0f64); nm.num_vertices()];
    let mut grad_s = vec![0.0f64; nm.num_vertices()];
    let mut total = 0.0;
    let (h, w) = image.shape();
    for row in 0..h {
        for col in 0..w {
            let f = image.cell(row, col);
            if !mask.get(row, col) {
                total += dot64(f, nm.background());
                continue;
            }
            px.blend(row, col, &grid, &rec, &facing, nm, kernel, bg_weight);
            let gnorm = px.g.iter().map(|v| v * v).sum::<f64>().sqrt();
            let fg: f64 = f.iter().zip(&px.g).map(|(&a, b)| a as f64 * b).sum();
            let s = fg / gnorm;
            total += s;
            if px.neighbors.is_empty() {
                continue;
            }
            // ds/dg = (f - s g/|g|) / |g|; dg/du_k = (C_k - g) / Z
            let scale = 1.0 / (px.z * gnorm);
            let mut qg = 0.0;
            for ((qi, &fi), gi) in q.iter_mut().zip(f).zip(&px.g) {
                *qi = (fi as f64 - s * gi / gnorm) * scale;
                qg += *qi * gi;
            }
            for n in &px.neighbors {
                let qc: f64 = q
                    .iter()
                    .zip(nm.vertex_feature(n.vertex))
                    .map(|(a, &b)| a * b as f64)
                    .sum();
                let dl_du = -inv_t * (qc - qg);
                let coeff = dl_du * n.dweight * 2.0;
                let e = &mut grad_uv[n.vertex];
                e.0 += coeff * n.du;
                e.1 += coeff * n.dv;
                grad_s[n.vertex] += dl_du * n.radial;
            }
        }
    }
    let smooth = -total * inv_t;
    if !smooth.is_finite() || !hard.is_finite() {
        return Err(RenderError::NonFinite);
    }

    let dr = pose.rotation_derivatives();
    let focal = camera.focal;
    let mut gradient = [0.0; 4];
    for (k, (&(gu, gv), &gs)) in grad_uv.iter().zip(&grad_s).enumerate() {
        if gu == 0.0 && gv == 0.0 && gs == 0.0 {
            continue;
        }
        let p = pts[k];
        let iz = 1.0 / p.z;
        let mut dl_dx = Vector3::new(
            gu * focal * iz,
            gv * focal * iz,
            -(gu * p.x + gv * p.y) * focal * iz * iz,
        );
        // s = -(n_c . p) / |p|
        let n_c = rot * nm.normals()[k];
        let len = p.norm();
        let dl_dn = -gs / len * p;
        dl_dx += gs * (-n_c / len + n_c.dot(&p) / (len * len * len) * p);
        let v = nm.mesh().vertices()[k];
        let n = nm.normals()[k];
        for (a, d) in dr.iter().enumerate() {
            gradient[a] += dl_dx.dot(&(d * v)) + dl_dn.dot(&(d * n));
        }
        gradient[3] += dl_dx.z;
    }
    Ok(Evaluation { hard, smooth, gradient })
}

/// Feature map predicted by the hard assignment at `pose`, and its silhouette.
pub fn render_hard(nm: &NeuralMesh, pose: &Pose, camera: &Camera) -> Result<(FeatureMap, ForegroundMask)> {
    let rec = rasterize_visibility(nm.mesh(), pose, camera)?;
    let fp = footprint(&rec);
    let (h, w) = camera.image_size;
    let map = FeatureMap::from_fn(h, w, nm.channels(), |r, c| match fp.vertex_at(r, c) {
        Some(v) => nm.vertex_feature(v).to_vec(),
        None => nm.background().to_vec(),
    })?;
    let mask = ForegroundMask::new(h, w, fp.coverage())?;
    Ok((map, mask))
}

/// Feature map predicted by the smoothed model: mask-foreground pixels carry
/// the normalized soft blend, all others the background feature.
pub fn render_soft(
    nm: &NeuralMesh,
    pose: &Pose,
    camera: &Camera,
    mask: &ForegroundMask,
    kernel: &SoftKernel,
) -> Result<FeatureMap> {
    kernel.validate()?;
    if mask.shape() != camera.image_size {
        return Err(RenderError::ShapeMismatch {
            expected: camera.image_size,
            found: mask.shape(),
        });
    }
    let rec = rasterize_visibility(nm.mesh(), pose, camera)?;
    let facing = facing(nm, &pose.rotation(), &camera_points(nm.mesh(), pose));
    let grid = VertexGrid::new(&rec, camera, &facing);
    let mut px = SoftPixel::new(nm.channels());
    let bg_weight = kernel.background_logit.exp();
    let (h, w) = camera.image_size;
    Ok(FeatureMap::from_fn(h, w, nm.channels(), |r, c| {
        if !mask.get(r, c) {
            return nm.background().to_vec();
        }
        px.blend(r, c, &grid, &rec, &facing, nm, kernel, bg_weight);
        let n = px.g.iter().map(|v| v * v).sum::<f64>().sqrt();
        px.g.iter().map(|v| (v / n) as f32).collect()
    })?)
}
