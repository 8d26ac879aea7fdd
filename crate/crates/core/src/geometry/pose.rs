use std::f64::consts::{PI, TAU};

use nalgebra::Matrix3;

use super::{GeometryError, Result};

/// Viewpoint of the camera relative to the object.
///
/// Angles are in radians. After [`Pose::canonical`] the azimuth lies in
/// `[0, 2pi)`, elevation in `[-pi/2, pi/2]` and theta in `[-pi, pi)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub azimuth: f64,
    pub elevation: f64,
    pub theta: f64,
    pub distance: f64,
}

fn wrap_signed(a: f64) -> f64 {
    // [-pi, pi); values already in range are returned bit-for-bit
    if (-PI..PI).contains(&a) {
        return a;
    }
    let w = (a + PI).rem_euclid(TAU) - PI;
    if w >= PI {
        w - TAU
    } else {
        w
    }
}

fn wrap_positive(a: f64) -> f64 {
    if (0.0..TAU).contains(&a) {
        return a;
    }
    let w = a.rem_euclid(TAU);
    if w >= TAU {
        0.0
    } else {
        w
    }
}

impl Pose {
    /// Validated, canonicalized pose.
    pub fn new(azimuth: f64, elevation: f64, theta: f64, distance: f64) -> Result<Self> {
        let p = Self {
            azimuth,
            elevation,
            theta,
            distance,
        };
        p.validate()?;
        Ok(p.canonical())
    }

    pub fn validate(&self) -> Result<()> {
        if ![self.azimuth, self.elevation, self.theta, self.distance]
            .iter()
            .all(|v| v.is_finite())
        {
            return Err(GeometryError::InvalidPose(format!("non-finite component in {self:?}")));
        }
        if self.distance <= 0.0 {
            return Err(GeometryError::InvalidPose(format!(
                "distance must be positive, got {}",
                self.distance
            )));
        }
        Ok(())
    }

    /// Equivalent pose with every angle in its canonical range.
    ///
    /// Elevations past the poles are folded back using the identity
    /// `Rz(t + pi) Rx(pi - e) Ry(a + pi) = Rz(t) Rx(e) Ry(a)`.
    pub fn canonical(&self) -> Self {
        let mut a = self.azimuth;
        let mut e = wrap_signed(self.elevation);
        let mut t = self.theta;
        if e > PI / 2.0 {
            e = PI - e;
            a += PI;
            t += PI;
        } else if e < -PI / 2.0 {
            e = -PI - e;
            a += PI;
            t += PI;
        }
        Self {
            azimuth: wrap_positive(a),
            elevation: e,
            theta: wrap_signed(t),
            distance: self.distance,
        }
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        rotation_from_angles(self.azimuth, self.elevation, self.theta)
    }

    /// Partial derivatives of the rotation with respect to azimuth,
    /// elevation and theta, in that order.
    pub fn rotation_derivatives(&self) -> [Matrix3<f64>; 3] {
        let (ry, dry) = rot_y(self.azimuth);
        let (rx, drx) = rot_x(self.elevation);
        let (rz, drz) = rot_z(self.theta);
        [rz * rx * dry, rz * drx * ry, drz * rx * ry]
    }

    /// Recovers a canonical pose from a rotation built by [`rotation_from_angles`].
    /// At gimbal lock (|elevation| = pi/2) the azimuth is set to zero.
    pub fn from_rotation(r: &Matrix3<f64>, distance: f64) -> Result<Self> {
        validate_rotation(r)?;
        let s = r[(2, 1)].clamp(-1.0, 1.0);
        let elevation = s.asin();
        let ce = elevation.cos();
        let (azimuth, theta) = if ce > 1e-12 {
            ((-r[(2, 0)]).atan2(r[(2, 2)]), (-r[(0, 1)]).atan2(r[(1, 1)]))
        } else {
            // Rx(+-pi/2) couples azimuth and theta; fold everything into theta.
            (0.0, r[(1, 0)].atan2(r[(0, 0)]))
        };
        Self::new(azimuth, elevation, theta, distance)
    }

    /// Unit vector from the object center towards the camera, object frame.
    pub fn view_direction(&self) -> nalgebra::Vector3<f64> {
        -(self.rotation().transpose() * nalgebra::Vector3::z())
    }

    /// The pose that views the object mirrored through its `z = 0` plane.
    pub fn mirrored_lateral(&self) -> Self {
        Self {
            azimuth: PI - self.azimuth,
            elevation: self.elevation,
            theta: -self.theta,
            distance: self.distance,
        }
        .canonical()
    }
}

/// Regular grid of viewpoints: `azimuths` evenly spaced azimuths at each
/// listed elevation, all at the same theta and distance.
///
/// Poses are ordered elevation-major, so index `e * azimuths + a` is azimuth
/// `2 pi a / azimuths` at `elevations[e]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseGrid {
    pub azimuths: usize,
    pub elevations: Vec<f64>,
    pub theta: f64,
    pub distance: f64,
}

impl Default for PoseGrid {
    /// 36 azimuths at elevations 0, 15 and 30 degrees, distance 5.
    fn default() -> Self {
        Self {
            azimuths: 36,
            elevations: vec![0.0, PI / 12.0, PI / 6.0],
            theta: 0.0,
            distance: 5.0,
        }
    }
}

impl PoseGrid {
    pub fn len(&self) -> usize {
        self.azimuths * self.elevations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn poses(&self) -> Result<Vec<Pose>> {
        let mut out = Vec::with_capacity(self.len());
        for &e in &self.elevations {
            for a in 0..self.azimuths {
                out.push(Pose::new(
                    TAU * a as f64 / self.azimuths as f64,
                    e,
                    self.theta,
                    self.distance,
                )?);
            }
        }
        Ok(out)
    }
}

fn rot_x(a: f64) -> (Matrix3<f64>, Matrix3<f64>) {
    let (s, c) = a.sin_cos();
    (
        Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c),
        Matrix3::new(0.0, 0.0, 0.0, 0.0, -s, -c, 0.0, c, -s),
    )
}

fn rot_y(a: f64) -> (Matrix3<f64>, Matrix3<f64>) {
    let (s, c) = a.sin_cos();
    (
        Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c),
        Matrix3::new(-s, 0.0, c, 0.0, 0.0, 0.0, -c, 0.0, -s),
    )
}

fn rot_z(a: f64) -> (Matrix3<f64>, Matrix3<f64>) {
    let (s, c) = a.sin_cos();
    (
        Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0),
        Matrix3::new(-s, -c, 0.0, c, -s, 0.0, 0.0, 0.0, 0.0),
    )
}

/// `Rz(theta) * Rx(elevation) * Ry(azimuth)`.
pub fn rotation_from_angles(azimuth: f64, elevation: f64, theta: f64) -> Matrix3<f64> {
    rot_z(theta).0 * rot_x(elevation).0 * rot_y(azimuth).0
}

pub fn validate_rotation(r: &Matrix3<f64>) -> Result<()> {
    if !r.iter().all(|v| v.is_finite()) {
        return Err(GeometryError::NotRotation("non-finite entries".into()));
    }
    let err = (r.transpose() * r - Matrix3::identity()).abs().max();
    if err > 1e-6 {
        return Err(GeometryError::NotRotation(format!(
            "|R^T R - I| = {err:e} exceeds 1e-6"
        )));
    }
    let det = r.determinant();
    if (det - 1.0).abs() > 1e-6 {
        return Err(GeometryError::NotRotation(format!("determinant {det}")));
    }
    Ok(())
}

/// Angle of the relative rotation `R1^T R2`, in `[0, pi]`.
///
/// Uses `atan2(|skew part|, trace - 1)`, which stays accurate near both 0
/// and pi where the plain `acos` form loses precision.
pub fn geodesic_distance(r1: &Matrix3<f64>, r2: &Matrix3<f64>) -> Result<f64> {
    validate_rotation(r1)?;
    validate_rotation(r2)?;
    let m = r1.transpose() * r2;
    let sin2 =
        ((m[(2, 1)] - m[(1, 2)]).powi(2) + (m[(0, 2)] - m[(2, 0)]).powi(2) + (m[(1, 0)] - m[(0, 1)]).powi(2)).sqrt();
    let cos2 = m.trace() - 1.0;
    Ok(sin2.atan2(cos2).clamp(0.0, PI))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::{Rotation3, Unit, Vector3};
    use proptest::prelude::*;

    #[test]
    fn zero_pose_is_identity() {
        let r = rotation_from_angles(0.0, 0.0, 0.0);
        assert_eq!(r, Matrix3::identity());
    }

    #[test]
    fn azimuth_pi_flips_x() {
        // independent composition through nalgebra's axis-angle constructor
        let expected = Rotation3::from_axis_angle(&Vector3::y_axis(), PI).into_inner();
        let r = rotation_from_angles(PI, 0.0, 0.0);
        assert_relative_eq!(r, expected, epsilon = 1e-12);
        let x = r * Vector3::x();
        assert_relative_eq!(x, -Vector3::x(), epsilon = 1e-12);
    }

    #[test]
    fn matches_axis_angle_composition() {
        let (a, e, t) = (0.7, -0.3, 1.9);
        let expected = Rotation3::from_axis_angle(&Vector3::z_axis(), t)
            * Rotation3::from_axis_angle(&Vector3::x_axis(), e)
            * Rotation3::from_axis_angle(&Vector3::y_axis(), a);
        assert_relative_eq!(rotation_from_angles(a, e, t), expected.into_inner(), epsilon = 1e-12);
    }

    #[test]
    fn geodesic_examples() {
        let i = Matrix3::identity();
        assert_eq!(geodesic_distance(&i, &i).unwrap(), 0.0);
        let rz = Rotation3::from_axis_angle(&Vector3::z_axis(), PI / 6.0).into_inner();
        assert_relative_eq!(geodesic_distance(&i, &rz).unwrap(), PI / 6.0, epsilon = 1e-12);
        for axis in [Vector3::x(), Vector3::new(1.0, 2.0, -0.5), Vector3::new(0.0, -1.0, 3.0)] {
            let r = Rotation3::from_axis_angle(&Unit::new_normalize(axis), PI).into_inner();
            assert_relative_eq!(geodesic_distance(&i, &r).unwrap(), PI, epsilon = 1e-7);
        }
        let skewed = Matrix3::new(1.0, 0.1, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        assert!(geodesic_distance(&i, &skewed).is_err());
        let reflection = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0));
        assert!(geodesic_distance(&i, &reflection).is_err());
    }

    #[test]
    fn canonicalization_preserves_rotation() {
        let raw = Pose {
            azimuth: -7.0,
            elevation: 2.5,
            theta: 9.0,
            distance: 3.0,
        };
        let c = raw.canonical();
        assert!((0.0..TAU).contains(&c.azimuth));
        assert!((-PI / 2.0..=PI / 2.0).contains(&c.elevation));
        assert!((-PI..PI).contains(&c.theta));
        assert_relative_eq!(raw.rotation(), c.rotation(), epsilon = 1e-12);
    }

    #[test]
    fn rotation_derivatives_match_finite_differences() {
        let p = Pose::new(0.4, 0.2, -0.3, 5.0).unwrap();
        let d = p.rotation_derivatives();
        let h = 1e-6;
        for k in 0..3 {
            let mut hi = [p.azimuth, p.elevation, p.theta];
            let mut lo = hi;
            hi[k] += h;
            lo[k] -= h;
            let fd =
                (rotation_from_angles(hi[0], hi[1], hi[2]) - rotation_from_angles(lo[0], lo[1], lo[2])) / (2.0 * h);
            assert_relative_eq!(d[k], fd, epsilon = 1e-8);
        }
    }

    #[test]
    fn zero_pose_camera_sits_on_negative_z() {
        let p = Pose::new(0.0, 0.0, 0.0, 5.0).unwrap();
        assert_relative_eq!(p.view_direction(), -Vector3::z(), epsilon = 1e-12);
        // positive elevation moves the camera towards -y, the object's up
        let up = Pose::new(0.0, 0.3, 0.0, 5.0).unwrap();
        assert!(up.view_direction().y < 0.0);
    }

    #[test]
    fn mirrored_pose_mirrors_view_direction() {
        let p = Pose::new(0.9, 0.25, 0.1, 4.0).unwrap();
        let m = p.mirrored_lateral();
        let (d, dm) = (p.view_direction(), m.view_direction());
        assert_relative_eq!(dm, Vector3::new(d.x, d.y, -d.z), epsilon = 1e-12);
    }

    proptest! {
        #[test]
        fn orthonormal_for_any_angles(a in -10.0..10.0f64, e in -10.0..10.0f64, t in -10.0..10.0f64) {
            let r = rotation_from_angles(a, e, t);
            let err = (r.transpose() * r - Matrix3::identity()).abs().max();
            prop_assert!(err < 1e-12);
            prop_assert!((r.determinant() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn decomposition_recovers_angles(
            a in 0.0..TAU,
            e in (-PI / 2.0 + 1e-3)..(PI / 2.0 - 1e-3),
            t in -PI..PI,
        ) {
            let p = Pose::new(a, e, t, 2.0).unwrap();
            let back = Pose::from_rotation(&p.rotation(), 2.0).unwrap();
            let da = wrap_signed(back.azimuth - p.azimuth).abs();
            let dt = wrap_signed(back.theta - p.theta).abs();
            prop_assert!(da < 1e-9, "azimuth {} vs {}", back.azimuth, p.azimuth);
            prop_assert!((back.elevation - p.elevation).abs() < 1e-9);
            prop_assert!(dt < 1e-9);
        }

        #[test]
        fn geodesic_is_a_metric(
            x in proptest::array::uniform3(-4.0..4.0f64),
            y in proptest::array::uniform3(-4.0..4.0f64),
            z in proptest::array::uniform3(-4.0..4.0f64),
        ) {
            let [a, b, c] = [x, y, z].map(|v| rotation_from_angles(v[0], v[1], v[2]));
            let ab = geodesic_distance(&a, &b).unwrap();
            let ba = geodesic_distance(&b, &a).unwrap();
            let bc = geodesic_distance(&b, &c).unwrap();
            let ac = geodesic_distance(&a, &c).unwrap();
            prop_assert_eq!(ab, ba);
            prop_assert!(ac <= ab + bc + 1e-9);
            prop_assert!((0.0..=PI).contains(&ab));
            prop_assert!(geodesic_distance(&a, &a).unwrap() < 1e-9);
        }
    }
}
