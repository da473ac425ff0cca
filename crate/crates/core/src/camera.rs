//! Pinhole intrinsics, azimuth/elevation poses, rigid transforms and pose-pair
//! sampling.
//!
//! Conventions: right-handed world with +y up; camera frame has +x right,
//! +y down (image rows) and +z forward. A pose at azimuth `a`, elevation `e`
//! and distance `d` places the camera centre at
//! `d * (cos e * sin a, sin e, -cos e * cos a)` looking at the world origin.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Matrix4, Point3, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) || !fx.is_finite() || !fy.is_finite() {
            return Err(Error::invalid("intrinsics", format!("focal lengths must be positive, got ({fx}, {fy})")));
        }
        if !cx.is_finite() || !cy.is_finite() || cx < 0.0 || cy < 0.0 {
            return Err(Error::invalid("intrinsics", format!("principal point ({cx}, {cy}) outside image")));
        }
        Ok(Self { fx, fy, cx, cy })
    }

    /// Fixed training intrinsics for square `size`×`size` images:
    /// `fx = fy = 2s`, `cx = cy = s/2`.
    pub fn from_image_size(size: usize) -> Result<Self> {
        if size < 2 {
            return Err(Error::invalid("image size", format!("expected at least 2 pixels, got {size}")));
        }
        let s = size as f64;
        Self::new(2.0 * s, 2.0 * s, s / 2.0, s / 2.0)
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn inverse_matrix(&self) -> Matrix3<f64> {
        Matrix3::new(
            1.0 / self.fx,
            0.0,
            -self.cx / self.fx,
            0.0,
            1.0 / self.fy,
            -self.cy / self.fy,
            0.0,
            0.0,
            1.0,
        )
    }

    /// Camera-space point → continuous pixel coordinate. Caller checks `z > 0`.
    #[inline]
    pub fn project(&self, p: &Vector3<f64>) -> (f64, f64) {
        (self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy)
    }

    /// Pixel coordinate plus depth (camera z) → camera-space point.
    #[inline]
    pub fn unproject(&self, x: f64, y: f64, depth: f64) -> Vector3<f64> {
        Vector3::new((x - self.cx) / self.fx * depth, (y - self.cy) / self.fy * depth, depth)
    }
}

/// Camera placement on a sphere around the origin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PoseDegrees", into = "PoseDegrees")]
pub struct CameraPose {
    pub azimuth: f64,
    pub elevation: f64,
    pub distance: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PoseDegrees {
    azimuth_deg: f64,
    elevation_deg: f64,
    #[serde(default = "unit_distance")]
    distance: f64,
}

fn unit_distance() -> f64 {
    1.0
}

impl TryFrom<PoseDegrees> for CameraPose {
    type Error = Error;

    fn try_from(p: PoseDegrees) -> Result<Self> {
        CameraPose::from_degrees(p.azimuth_deg, p.elevation_deg, p.distance)
    }
}

impl From<CameraPose> for PoseDegrees {
    fn from(p: CameraPose) -> Self {
        PoseDegrees {
            azimuth_deg: p.azimuth.to_degrees(),
            elevation_deg: p.elevation.to_degrees(),
            distance: p.distance,
        }
    }
}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    }
    w
}

impl CameraPose {
    /// Builds a pose, wrapping azimuth into `(-pi, pi]`.
    pub fn new(azimuth: f64, elevation: f64, distance: f64) -> Result<Self> {
        if !azimuth.is_finite() || !elevation.is_finite() {
            return Err(Error::invalid("pose", "angles must be finite"));
        }
        if !(distance > 0.0) || !distance.is_finite() {
            return Err(Error::invalid("pose", format!("distance must be positive, got {distance}")));
        }
        if elevation.abs() >= PI / 2.0 {
            return Err(Error::invalid(
                "pose",
                format!("elevation {elevation} rad is at or beyond the +y-up gimbal singularity"),
            ));
        }
        Ok(Self {
            azimuth: wrap_angle(azimuth),
            elevation,
            distance,
        })
    }

    pub fn from_degrees(azimuth_deg: f64, elevation_deg: f64, distance: f64) -> Result<Self> {
        Self::new(azimuth_deg.to_radians(), elevation_deg.to_radians(), distance)
    }

    /// Unit-distance pose.
    pub fn at_unit_distance(azimuth: f64, elevation: f64) -> Result<Self> {
        Self::new(azimuth, elevation, 1.0)
    }

    /// Camera centre in world coordinates.
    pub fn center(&self) -> Point3<f64> {
        let (sa, ca) = self.azimuth.sin_cos();
        let (se, ce) = self.elevation.sin_cos();
        Point3::new(ce * sa, se, -ce * ca) * self.distance
    }

    /// World→camera transform looking at the origin with +y up.
    pub fn extrinsics(&self) -> RigidTransform {
        pose_to_extrinsics(self)
    }

    pub fn cyclic(&self) -> CyclicEncoding {
        cyclic_encode(self)
    }
}

/// World→camera transform for `pose`.
pub fn pose_to_extrinsics(pose: &CameraPose) -> RigidTransform {
    let c = pose.center().coords;
    let forward = -c / pose.distance;
    // sin/cos built directly from the angles keeps R orthonormal to ~1 ulp.
    let (sa, ca) = pose.azimuth.sin_cos();
    let (se, ce) = pose.elevation.sin_cos();
    let right = Vector3::new(-ca, 0.0, -sa);
    let down = Vector3::new(sa * se, -ce, -ca * se);
    debug_assert!((right.cross(&down) - forward).norm() < 1e-12);
    let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
    let translation = -(rotation * c);
    RigidTransform { rotation, translation }
}

/// Rotation plus translation, `x' = R x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Validating constructor: `R` must be a proper rotation within 1e-9.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let t = Self { rotation, translation };
        if !t.is_proper(1e-9) {
            return Err(Error::invalid("rigid transform", "rotation is not orthonormal with det +1"));
        }
        Ok(t)
    }

    /// Checks `RᵀR = I` and `det R = 1` within `tol` (max-abs norm).
    pub fn is_proper(&self, tol: f64) -> bool {
        let ortho = self.rotation.transpose() * self.rotation - Matrix3::identity();
        ortho.amax() < tol && (self.rotation.determinant() - 1.0).abs() < tol && self.translation.iter().all(|v| v.is_finite())
    }

    #[inline]
    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self ∘ first`: applies `first`, then `self`.
    pub fn compose(&self, first: &RigidTransform) -> Self {
        Self {
            rotation: self.rotation * first.rotation,
            translation: self.rotation * first.translation + self.translation,
        }
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }
}

/// Transform carrying camera-1 coordinates into camera-2 coordinates,
/// `E2 ∘ E1⁻¹`. Identical inputs give the exact identity.
pub fn relative_transform(c1: &RigidTransform, c2: &RigidTransform) -> RigidTransform {
    if c1 == c2 {
        return RigidTransform::identity();
    }
    c2.compose(&c1.inverse())
}

/// `(cos a, sin a, cos e, sin e)` conditioning vector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CyclicEncoding(pub [f64; 4]);

impl CyclicEncoding {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

pub fn cyclic_encode(pose: &CameraPose) -> CyclicEncoding {
    let (sa, ca) = pose.azimuth.sin_cos();
    let (se, ce) = pose.elevation.sin_cos();
    CyclicEncoding([ca, sa, ce, se])
}

/// Ranges for pose-pair sampling. Ranges are full spans centred on zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DistributionDegrees", into = "DistributionDegrees")]
pub struct PoseDistribution {
    pub azimuth_range: f64,
    pub elevation_range: f64,
    pub max_delta: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DistributionDegrees {
    azimuth_range_deg: f64,
    elevation_range_deg: f64,
    #[serde(default = "default_max_delta_deg")]
    max_delta_deg: f64,
}

fn default_max_delta_deg() -> f64 {
    30.0
}

impl TryFrom<DistributionDegrees> for PoseDistribution {
    type Error = Error;

    fn try_from(d: DistributionDegrees) -> Result<Self> {
        PoseDistribution::new(
            d.azimuth_range_deg.to_radians(),
            d.elevation_range_deg.to_radians(),
            d.max_delta_deg.to_radians(),
        )
    }
}

impl From<PoseDistribution> for DistributionDegrees {
    fn from(d: PoseDistribution) -> Self {
        DistributionDegrees {
            azimuth_range_deg: d.azimuth_range.to_degrees(),
            elevation_range_deg: d.elevation_range.to_degrees(),
            max_delta_deg: d.max_delta.to_degrees(),
        }
    }
}

impl PoseDistribution {
    pub const DEFAULT_MAX_DELTA_DEG: f64 = 30.0;

    pub fn new(azimuth_range: f64, elevation_range: f64, max_delta: f64) -> Result<Self> {
        if !(azimuth_range > 0.0 && azimuth_range <= 2.0 * PI + 1e-12) {
            return Err(Error::invalid("pose distribution", format!("azimuth range {azimuth_range} rad not in (0, 2pi]")));
        }
        if !(elevation_range >= 0.0 && elevation_range < PI) {
            return Err(Error::invalid("pose distribution", format!("elevation range {elevation_range} rad not in [0, pi)")));
        }
        if !(max_delta >= 0.0 && max_delta <= azimuth_range) {
            return Err(Error::invalid(
                "pose distribution",
                format!("max delta {max_delta} rad must lie in [0, azimuth range]"),
            ));
        }
        Ok(Self {
            azimuth_range,
            elevation_range,
            max_delta,
        })
    }

    pub fn from_degrees(azimuth_range: f64, elevation_range: f64, max_delta: f64) -> Result<Self> {
        Self::new(azimuth_range.to_radians(), elevation_range.to_radians(), max_delta.to_radians())
    }

    /// 120° azimuth, 35° elevation, 30° cap.
    pub fn face() -> Self {
        Self::from_degrees(120.0, 35.0, 30.0).expect("preset is valid")
    }

    /// Full-circle azimuth, 35° elevation, 30° cap.
    pub fn car() -> Self {
        Self::from_degrees(360.0, 35.0, 30.0).expect("preset is valid")
    }

    fn wraps_azimuth(&self) -> bool {
        self.azimuth_range >= 2.0 * PI - 1e-12
    }

    /// Uniform single pose over the box at unit distance.
    pub fn sample_pose<R: Rng + ?Sized>(&self, rng: &mut R) -> CameraPose {
        let half_a = self.azimuth_range / 2.0;
        let half_e = self.elevation_range / 2.0;
        let a = uniform(rng, -half_a, half_a);
        let e = uniform(rng, -half_e, half_e);
        CameraPose::at_unit_distance(a, e).expect("elevation range below pi keeps poses valid")
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if hi <= lo {
        return lo;
    }
    lo + (hi - lo) * rng.random::<f64>()
}

/// Samples `(c1, c2)`: `c1` uniform over the distribution box, `c2` uniform
/// over the box clipped to `±max_delta` around `c1` per axis. A full-circle
/// azimuth range wraps instead of clipping.
pub fn sample_pose_pair<R: Rng + ?Sized>(dist: &PoseDistribution, rng: &mut R) -> (CameraPose, CameraPose) {
    let c1 = dist.sample_pose(rng);
    let half_a = dist.azimuth_range / 2.0;
    let half_e = dist.elevation_range / 2.0;
    let d = dist.max_delta;
    let a2 = if dist.wraps_azimuth() {
        uniform(rng, c1.azimuth - d, c1.azimuth + d)
    } else {
        uniform(rng, (c1.azimuth - d).max(-half_a), (c1.azimuth + d).min(half_a))
    };
    let e2 = uniform(rng, (c1.elevation - d).max(-half_e), (c1.elevation + d).min(half_e));
    let c2 = CameraPose::at_unit_distance(a2, e2).expect("clipped elevation stays valid");
    (c1, c2)
}

/// `n` independent poses from a ChaCha8 stream seeded with `seed`.
pub fn sample_poses(dist: &PoseDistribution, n: usize, seed: u64) -> Vec<CameraPose> {
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
    (0..n).map(|_| dist.sample_pose(&mut rng)).collect()
}
