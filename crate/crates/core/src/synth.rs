//! Seeded synthetic corpora: feature maps rendered from a known neural mesh
//! at known poses, with noise, occlusion and template-view banks.
//!
//! A vertex seen from object-frame view direction `d` renders as
//! `normalize(C_v + k * (d_x B_vx + d_y B_vy + d_z B_vz))`, where `C_v` is its
//! identity feature, `B_v*` are random view codes and `k` is the view
//! strength (0 gives view-independent features).

use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use thiserror::Error;

use crate::featureio::{CorpusManifest, FeatureMap, ForegroundMask, FormatError, ManifestEntry};
use crate::geometry::{rasterize_visibility, Camera, GeometryError, Mesh, Pose, PoseGrid};
use crate::kernel::{dot64, normalize};
use crate::rendercompare::{NeuralMesh, RenderError, DEFAULT_MOMENTUM, DEFAULT_TEMPERATURE};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("I/O error on {}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Render(#[from] RenderError),
}

pub type Result<T> = std::result::Result<T, SynthError>;

/// Generating model for synthetic feature maps.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthWorld {
    nm: NeuralMesh,
    /// `N x 3 x c` view codes.
    view_codes: Vec<f32>,
    view_strength: f64,
}

fn gaussian_unit(rng: &mut impl Rng, c: usize) -> Vec<f32> {
    let mut v: Vec<f32> = (0..c).map(|_| rng.sample::<f64, _>(StandardNormal) as f32).collect();
    normalize(&mut v);
    v
}

impl SynthWorld {
    pub fn new(nm: NeuralMesh, view_codes: Vec<f32>, view_strength: f64) -> Result<Self> {
        if view_codes.len() != nm.num_vertices() * 3 * nm.channels() {
            return Err(SynthError::InvalidParameter(format!(
                "expected {} view-code values, got {}",
                nm.num_vertices() * 3 * nm.channels(),
                view_codes.len()
            )));
        }
        if !(view_strength >= 0.0 && view_strength.is_finite()) {
            return Err(SynthError::InvalidParameter(format!("view strength {view_strength}")));
        }
        Ok(Self {
            nm,
            view_codes,
            view_strength,
        })
    }

    /// Random unit identity features, background and view codes.
    pub fn random(mesh: Mesh, channels: usize, view_strength: f64, rng: &mut impl Rng) -> Result<Self> {
        let nm = NeuralMesh::random(mesh, channels, rng, DEFAULT_TEMPERATURE, DEFAULT_MOMENTUM)?;
        let codes = (0..nm.num_vertices() * 3)
            .flat_map(|_| gaussian_unit(rng, channels))
            .collect();
        Self::new(nm, codes, view_strength)
    }

    /// Like [`SynthWorld::random`], but every vertex strictly inside the
    /// bounding box in x and y whose reflection through `z = 0` is also a
    /// vertex gets its partner's identity feature and mirrored view codes, so
    /// that the pair renders identically from mirrored viewpoints.
    ///
    /// Returns the world and the partner of each vertex.
    pub fn mirrored(
        mesh: Mesh,
        channels: usize,
        view_strength: f64,
        rng: &mut impl Rng,
    ) -> Result<(Self, Vec<Option<usize>>)> {
        let partners = mirror_partners(&mesh);
        let world = Self::random(mesh, channels, view_strength, rng)?;
        let c = channels;
        let mut features = world.nm.features().to_vec();
        let mut codes = world.view_codes;
        for (v, p) in partners.iter().enumerate() {
            let Some(p) = *p else { continue };
            // the vertex on the z < 0 side is the source
            if world.nm.mesh().vertices()[v].z >= 0.0 {
                continue;
            }
            features.copy_within(v * c..(v + 1) * c, p * c);
            for axis in 0..3 {
                let (src, dst) = ((v * 3 + axis) * c, (p * 3 + axis) * c);
                codes.copy_within(src..src + c, dst);
                if axis == 2 {
                    for x in &mut codes[dst..dst + c] {
                        *x = -*x;
                    }
                }
            }
        }
        let nm = NeuralMesh::new(
            world.nm.mesh().clone(),
            c,
            features,
            world.nm.background().to_vec(),
            world.nm.temperature(),
            world.nm.momentum(),
        )?;
        Ok((Self::new(nm, codes, view_strength)?, partners))
    }

    pub fn neural_mesh(&self) -> &NeuralMesh {
        &self.nm
    }

    pub fn view_strength(&self) -> f64 {
        self.view_strength
    }

    pub fn channels(&self) -> usize {
        self.nm.channels()
    }

    /// Feature of vertex `v` seen from object-frame direction `dir`.
    pub fn vertex_feature(&self, v: usize, dir: &Vector3<f64>) -> Vec<f32> {
        let c = self.nm.channels();
        let base = self.nm.vertex_feature(v);
        let mut out: Vec<f32> = base.to_vec();
        if self.view_strength > 0.0 {
            for axis in 0..3 {
                let code = &self.view_codes[(v * 3 + axis) * c..(v * 3 + axis + 1) * c];
                let k = (self.view_strength * dir[axis]) as f32;
                for (o, &b) in out.iter_mut().zip(code) {
                    *o += k * b;
                }
            }
            normalize(&mut out);
        }
        out
    }

    /// Per-vertex vectors of norm `strength`, each orthogonal to its vertex's
    /// identity feature and view codes.
    pub fn nuisance(&self, strength: f64, rng: &mut impl Rng) -> Result<Vec<f32>> {
        let c = self.nm.channels();
        if c < 5 {
            return Err(SynthError::InvalidParameter(
                "nuisance needs at least 5 channels".into(),
            ));
        }
        let mut out = Vec::with_capacity(self.nm.num_vertices() * c);
        for v in 0..self.nm.num_vertices() {
            let mut basis: Vec<Vec<f64>> = Vec::with_capacity(4);
            let spans = std::iter::once(self.nm.vertex_feature(v))
                .chain((0..3).map(|a| &self.view_codes[(v * 3 + a) * c..(v * 3 + a + 1) * c]));
            for s in spans {
                let mut b: Vec<f64> = s.iter().map(|&x| x as f64).collect();
                orthogonalize(&mut b, &basis);
                let n = b.iter().map(|x| x * x).sum::<f64>().sqrt();
                if n > 1e-9 {
                    b.iter_mut().for_each(|x| *x /= n);
                    basis.push(b);
                }
            }
            let mut z: Vec<f64> = (0..c).map(|_| rng.sample(StandardNormal)).collect();
            orthogonalize(&mut z, &basis);
            let n = z.iter().map(|x| x * x).sum::<f64>().sqrt();
            out.extend(z.iter().map(|x| (x * strength / n) as f32));
        }
        Ok(out)
    }

    /// Noiseless render. `nuisance` (row-major `N x c`) is added to every
    /// vertex feature before normalization. Returns the map, the silhouette
    /// and the footprint vertex of every pixel.
    pub fn render(&self, pose: &Pose, camera: &Camera, nuisance: Option<&[f32]>) -> Result<Rendered> {
        let c = self.nm.channels();
        if let Some(z) = nuisance {
            if z.len() != self.nm.num_vertices() * c {
                return Err(SynthError::InvalidParameter("nuisance has the wrong length".into()));
            }
        }
        let rec = rasterize_visibility(self.nm.mesh(), pose, camera)?;
        let fp = rec.footprint.as_ref().expect("footprint is always set");
        let dir = pose.view_direction();
        let (h, w) = camera.image_size;
        let mut cache: Vec<Option<Vec<f32>>> = vec![None; self.nm.num_vertices()];
        let mut vertex = Vec::with_capacity(h * w);
        let map = FeatureMap::from_fn(h, w, c, |r, col| {
            let v = fp.vertex_at(r, col);
            vertex.push(v);
            match v {
                Some(v) => cache[v]
                    .get_or_insert_with(|| {
                        let mut f = self.vertex_feature(v, &dir);
                        if let Some(z) = nuisance {
                            for (a, &b) in f.iter_mut().zip(&z[v * c..(v + 1) * c]) {
                                *a += b;
                            }
                            normalize(&mut f);
                        }
                        f
                    })
                    .clone(),
                None => self.nm.background().to_vec(),
            }
        })?;
        let mask = ForegroundMask::new(h, w, fp.coverage())?;
        Ok(Rendered { map, mask, vertex })
    }
}

fn orthogonalize(v: &mut [f64], basis: &[Vec<f64>]) {
    for b in basis {
        let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
        v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
    }
}

fn mirror_partners(mesh: &Mesh) -> Vec<Option<usize>> {
    let verts = mesh.vertices();
    let (mut xmax, mut ymax) = (0.0f64, 0.0f64);
    for v in verts {
        xmax = xmax.max(v.x.abs());
        ymax = ymax.max(v.y.abs());
    }
    let tol = 1e-9 * mesh.bounding_radius().max(1.0);
    let inside = |v: &Vector3<f64>| v.x.abs() < xmax - tol && v.y.abs() < ymax - tol && v.z.abs() > tol;
    verts
        .iter()
        .map(|v| {
            if !inside(v) {
                return None;
            }
            let m = Vector3::new(v.x, v.y, -v.z);
            verts.iter().position(|u| (u - m).norm() <= tol)
        })
        .collect()
}

/// Output of [`SynthWorld::render`].
#[derive(Debug, Clone)]
pub struct Rendered {
    pub map: FeatureMap,
    pub mask: ForegroundMask,
    /// Footprint vertex per pixel, row-major.
    pub vertex: Vec<Option<usize>>,
}

/// Adds independent `N(0, sigma^2)` noise to every component and renormalizes.
pub fn add_noise(map: &FeatureMap, sigma: f64, rng: &mut impl Rng) -> Result<FeatureMap> {
    if sigma == 0.0 {
        return Ok(map.clone());
    }
    let data = map
        .data()
        .iter()
        .map(|&x| x + (sigma * rng.sample::<f64, _>(StandardNormal)) as f32)
        .collect();
    Ok(FeatureMap::new(map.height(), map.width(), map.channels(), data)?)
}

/// Replaces `floor(fraction * |FG|)` foreground pixels, taken in order along
/// a random image direction, by the background feature plus noise, and drops
/// them from the mask. Returns the new map, the new mask and the count.
pub fn occlude(
    map: &FeatureMap,
    mask: &ForegroundMask,
    fraction: f64,
    background: &[f32],
    sigma: f64,
    rng: &mut impl Rng,
) -> Result<(FeatureMap, ForegroundMask, usize)> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(SynthError::InvalidParameter(format!("occlusion fraction {fraction}")));
    }
    let fg = mask.foreground_pixels();
    let k = ((fraction * fg.len() as f64) + 1e-9).floor() as usize;
    let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let (s, c) = angle.sin_cos();
    let mut order: Vec<(f64, usize)> = fg
        .iter()
        .enumerate()
        .map(|(i, &(r, col))| ((col as f64 + 0.5) * c + (r as f64 + 0.5) * s, i))
        .collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let ch = map.channels();
    let w = map.width();
    let mut data = map.data().to_vec();
    let mut new_mask = mask.clone();
    for &(_, i) in &order[..k] {
        let (r, col) = fg[i];
        let cell = &mut data[(r * w + col) * ch..(r * w + col + 1) * ch];
        for (x, &b) in cell.iter_mut().zip(background) {
            *x = b + (sigma * rng.sample::<f64, _>(StandardNormal)) as f32;
        }
        normalize(cell);
        new_mask.set(r, col, false);
    }
    Ok((FeatureMap::new(map.height(), w, ch, data)?, new_mask, k))
}

/// Distribution of ground-truth poses.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseSampler {
    /// Elevation is uniform on `[0, max_elevation]`.
    pub max_elevation: f64,
    /// Theta is uniform on `[-max_theta, max_theta]`.
    pub max_theta: f64,
    pub distance: f64,
    /// Distance is uniform on `distance * [1 - jitter, 1 + jitter]`.
    pub distance_jitter: f64,
}

impl Default for PoseSampler {
    fn default() -> Self {
        Self {
            max_elevation: std::f64::consts::PI / 6.0,
            max_theta: 5f64.to_radians(),
            distance: 5.0,
            distance_jitter: 0.1,
        }
    }
}

impl PoseSampler {
    pub fn sample(&self, rng: &mut impl Rng) -> Pose {
        let az = rng.random_range(0.0..std::f64::consts::TAU);
        let el = self.max_elevation * rng.random::<f64>();
        let th = self.max_theta * (2.0 * rng.random::<f64>() - 1.0);
        let d = self.distance * (1.0 + self.distance_jitter * (2.0 * rng.random::<f64>() - 1.0));
        Pose::new(az, el, th, d).expect("sampler ranges are valid")
    }
}

/// Corpus generation settings.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub count: usize,
    pub channels: usize,
    /// Per-component Gaussian noise before renormalization.
    pub noise: f64,
    pub occlusion: f64,
    pub view_strength: f64,
    pub seed: u64,
    pub camera: Camera,
    pub poses: PoseSampler,
    pub bank_grid: PoseGrid,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            count: 200,
            channels: 64,
            noise: 0.1,
            occlusion: 0.0,
            view_strength: 0.3,
            seed: 0,
            camera: Camera::centered(50.0, 32, 32).expect("valid camera"),
            poses: PoseSampler::default(),
            bank_grid: PoseGrid::default(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SynthError::InvalidParameter(m));
        if self.channels == 0 {
            return bad("channels must be positive".into());
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad(format!("noise {}", self.noise));
        }
        if !(0.0..=1.0).contains(&self.occlusion) {
            return bad(format!("occlusion {}", self.occlusion));
        }
        self.camera.validate()?;
        Ok(())
    }

    /// Seeded generator for a named stream of this corpus.
    pub fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }
}

/// One generated image.
#[derive(Debug, Clone)]
pub struct SynthImage {
    pub id: String,
    pub pose: Pose,
    pub map: FeatureMap,
    /// Visible-object mask: the silhouette minus occluded pixels.
    pub mask: ForegroundMask,
    pub occluded: usize,
    /// Footprint vertex per pixel of the unoccluded render.
    pub vertex: Vec<Option<usize>>,
}

const WORLD_STREAM: u64 = 0;
const BANK_STREAM: u64 = u64::MAX;

/// World used by [`generate_images`] for this config.
pub fn generate_world(cfg: &SynthConfig, mesh: Mesh) -> Result<SynthWorld> {
    cfg.validate()?;
    SynthWorld::random(mesh, cfg.channels, cfg.view_strength, &mut cfg.rng(WORLD_STREAM))
}

/// Image `index` of a corpus; each image has its own random stream, so any
/// subset can be regenerated independently.
pub fn generate_image(world: &SynthWorld, cfg: &SynthConfig, index: usize, prefix: &str) -> Result<SynthImage> {
    let mut rng = cfg.rng(1 + index as u64);
    let pose = cfg.poses.sample(&mut rng);
    let r = world.render(&pose, &cfg.camera, None)?;
    let noisy = add_noise(&r.map, cfg.noise, &mut rng)?;
    let (map, mask, occluded) = if cfg.occlusion > 0.0 {
        occlude(
            &noisy,
            &r.mask,
            cfg.occlusion,
            world.nm.background(),
            cfg.noise,
            &mut rng,
        )?
    } else {
        (noisy, r.mask, 0)
    };
    Ok(SynthImage {
        id: format!("{prefix}{index:05}"),
        pose,
        map,
        mask,
        occluded,
        vertex: r.vertex,
    })
}

pub fn generate_images(
    world: &SynthWorld,
    cfg: &SynthConfig,
    range: std::ops::Range<usize>,
    prefix: &str,
) -> Result<Vec<SynthImage>> {
    range
        .into_par_iter()
        .map(|i| generate_image(world, cfg, i, prefix))
        .collect()
}

/// Noiseless renders at every bank grid pose, optionally with a per-vertex
/// nuisance of the given norm.
pub fn generate_bank(world: &SynthWorld, cfg: &SynthConfig, nuisance: f64) -> Result<Vec<(Pose, FeatureMap)>> {
    let z = if nuisance > 0.0 {
        Some(world.nuisance(nuisance, &mut cfg.rng(BANK_STREAM))?)
    } else {
        None
    };
    cfg.bank_grid
        .poses()?
        .into_par_iter()
        .map(|p| Ok((p, world.render(&p, &cfg.camera, z.as_deref())?.map)))
        .collect()
}

/// Paths written by [`write_corpus`].
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusPaths {
    pub camera: PathBuf,
    pub template: PathBuf,
    pub generator: PathBuf,
    pub manifest: PathBuf,
    pub bank_manifest: PathBuf,
}

impl CorpusPaths {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            camera: dir.join("camera.cfg"),
            template: dir.join("template.obj"),
            generator: dir.join("generator.nmsh"),
            manifest: dir.join("manifest.tsv"),
            bank_manifest: dir.join("bank").join("manifest.tsv"),
        }
    }
}

fn create_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|source| SynthError::Io {
        path: p.to_path_buf(),
        source,
    })
}

/// Writes a complete corpus under `dir`: camera, template mesh, generating
/// checkpoint, images with masks and ground-truth manifest, and the bank of
/// noiseless grid-view renders with its own manifest.
pub fn write_corpus(dir: &Path, cfg: &SynthConfig, mesh: Mesh, bank_nuisance: f64) -> Result<CorpusPaths> {
    let world = generate_world(cfg, mesh)?;
    let paths = CorpusPaths::in_dir(dir);
    create_dir(&dir.join("images"))?;
    create_dir(&dir.join("bank"))?;
    cfg.camera.write(&paths.camera)?;
    world.nm.mesh().write(&paths.template)?;
    world.nm.write(&paths.generator)?;

    let images = generate_images(&world, cfg, 0..cfg.count, "img")?;
    let mut entries = Vec::with_capacity(images.len());
    for img in &images {
        let fp = dir.join("images").join(format!("{}.fmap", img.id));
        let mp = dir.join("images").join(format!("{}.msk", img.id));
        img.map.write(&fp)?;
        img.mask.write(&mp)?;
        entries.push(ManifestEntry {
            id: img.id.clone(),
            feature_path: fp,
            mask_path: Some(mp),
            pose: Some(img.pose),
        });
    }
    CorpusManifest::new(entries).write(&paths.manifest)?;

    let bank = generate_bank(&world, cfg, bank_nuisance)?;
    let mut entries = Vec::with_capacity(bank.len());
    for (i, (pose, map)) in bank.iter().enumerate() {
        let fp = dir.join("bank").join(format!("view{i:04}.fmap"));
        map.write(&fp)?;
        entries.push(ManifestEntry {
            id: format!("view{i:04}"),
            feature_path: fp,
            mask_path: None,
            pose: Some(*pose),
        });
    }
    CorpusManifest::new(entries).write(&paths.bank_manifest)?;
    Ok(paths)
}

/// Cosine similarity between two unit features.
pub fn similarity(a: &[f32], b: &[f32]) -> f64 {
    dot64(a, b)
}
