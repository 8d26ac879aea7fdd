//! Template meshes, pose and camera math, projection and z-buffer visibility.
//!
//! Frame conventions used throughout the crate:
//!
//! * Object frame: right-handed, object-centered. `x` runs along the object's
//!   length, `-y` is up, `z` is lateral (the `z = +w/2` and `z = -w/2` faces
//!   of a cuboid template are its two sides).
//! * Camera frame: `x` right, `y` down, `z` along the optical axis. A point is
//!   in front of the camera when its camera-frame `z` is positive.
//! * Extrinsics: `p_cam = R(pose) * p_obj + (0, 0, distance)` with
//!   `R = Rz(theta) * Rx(elevation) * Ry(azimuth)`. At the zero pose the
//!   camera sits on the object's `-z` axis, so it sees the `z = -w/2` side
//!   upright. Positive elevation raises the camera above the object.
//! * Pixels: pixel `(row, col)` covers `[col, col + 1) x [row, row + 1)` in
//!   continuous image coordinates, so its center is `(col + 0.5, row + 0.5)`.

mod camera;
mod mesh;
mod pose;
mod raster;

pub use camera::Camera;
pub use mesh::Mesh;
pub use pose::{geodesic_distance, rotation_from_angles, validate_rotation, Pose, PoseGrid};
pub(crate) use raster::camera_points;
pub use raster::{project_vertices, rasterize_visibility, Footprint, ProjectedVertex, VisibilityRecord};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("invalid mesh: {0}")]
    InvalidMesh(String),
    #[error("mesh parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("vertex {vertex} projects degenerately (camera-frame depth {depth})")]
    DegenerateProjection { vertex: usize, depth: f64 },
    #[error("matrix is not a rotation: {0}")]
    NotRotation(String),
    #[error("invalid pose: {0}")]
    InvalidPose(String),
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, GeometryError>;
