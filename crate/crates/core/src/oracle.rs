//! Analytic RGBD renderer for sphere, box and plane scenes with procedural
//! albedo textures, plus ground-truth visibility between two views.
//!
//! Depth is the camera-space z of the nearest hit along the ray through the
//! pixel centre. Colour is the albedo at the hit (no shading), averaged over
//! an `s x s` sub-pixel grid when supersampling.

use nalgebra::{Point3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{CameraIntrinsics, CameraPose, RigidTransform};
use crate::error::{Error, Result};
use crate::geometry::{in_bounds, RgbdImage};

pub const DEFAULT_FAR_DEPTH: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Shape {
    Sphere {
        center: [f64; 3],
        radius: f64,
    },
    /// Axis-aligned box.
    Box {
        center: [f64; 3],
        half_extents: [f64; 3],
    },
    /// Rectangle through `point` with unit `normal`; `extent` holds the
    /// half-sizes along the in-plane axes `u = normalize(h x n)`, `v = n x u`
    /// where `h` is world +y (world +x when the normal is vertical).
    Plane {
        point: [f64; 3],
        normal: [f64; 3],
        extent: [f64; 2],
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Texture {
    Solid {
        color: [f64; 3],
    },
    /// 3D world-space checker with cells of side `scale`.
    Checker {
        scale: f64,
        colors: [[f64; 3]; 2],
    },
    /// Linear ramp `t = clamp(0.5 + axis . p, 0, 1)` between the two colours.
    Gradient {
        axis: [f64; 3],
        colors: [[f64; 3]; 2],
    },
}

impl Texture {
    pub fn albedo(&self, p: &Point3<f64>) -> [f64; 3] {
        match self {
            Texture::Solid { color } => *color,
            Texture::Checker { scale, colors } => {
                let parity = (p.x / scale).floor() + (p.y / scale).floor() + (p.z / scale).floor();
                colors[(parity.rem_euclid(2.0) as usize) & 1]
            }
            Texture::Gradient { axis, colors } => {
                let t = (0.5 + axis[0] * p.x + axis[1] * p.y + axis[2] * p.z).clamp(0.0, 1.0);
                [0, 1, 2].map(|c| colors[0][c] + t * (colors[1][c] - colors[0][c]))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Primitive {
    pub shape: Shape,
    pub texture: Texture,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scene {
    pub primitives: Vec<Primitive>,
    #[serde(default = "default_background")]
    pub background: [f64; 3],
    #[serde(default = "default_far_depth")]
    pub far_depth: f64,
}

fn default_background() -> [f64; 3] {
    [1.0, 1.0, 1.0]
}

fn default_far_depth() -> f64 {
    DEFAULT_FAR_DEPTH
}

fn in_unit(c: &[f64; 3]) -> bool {
    c.iter().all(|v| (0.0..=1.0).contains(v))
}

impl Scene {
    pub fn new(primitives: Vec<Primitive>) -> Result<Self> {
        let s = Self {
            primitives,
            background: default_background(),
            far_depth: DEFAULT_FAR_DEPTH,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.far_depth > 0.0 && self.far_depth.is_finite()) {
            return Err(Error::invalid("scene.far_depth", format!("must be positive, got {}", self.far_depth)));
        }
        if !in_unit(&self.background) {
            return Err(Error::invalid("scene.background", "colour outside [0, 1]"));
        }
        for (i, p) in self.primitives.iter().enumerate() {
            let ok = match &p.shape {
                Shape::Sphere { radius, .. } => *radius > 0.0,
                Shape::Box { half_extents, .. } => half_extents.iter().all(|&e| e > 0.0),
                Shape::Plane { normal, extent, .. } => {
                    Vector3::from(*normal).norm() > 1e-12 && extent.iter().all(|&e| e > 0.0)
                }
            };
            if !ok {
                return Err(Error::invalid("scene.primitives", format!("primitive {i} has non-positive size")));
            }
            let colours_ok = match &p.texture {
                Texture::Solid { color } => in_unit(color),
                Texture::Checker { scale, colors } => *scale > 0.0 && colors.iter().all(in_unit),
                Texture::Gradient { colors, .. } => colors.iter().all(in_unit),
            };
            if !colours_ok {
                return Err(Error::invalid("scene.primitives", format!("primitive {i} has an invalid texture")));
            }
        }
        Ok(())
    }

    /// Checker-textured sphere of radius 0.3 at the origin.
    pub fn checker_sphere() -> Self {
        Self::sphere_with(Texture::Checker {
            scale: 0.1,
            colors: [[0.15, 0.25, 0.35], [0.85, 0.75, 0.6]],
        })
    }

    /// The same sphere with constant albedo.
    pub fn solid_sphere() -> Self {
        Self::sphere_with(Texture::Solid { color: [0.5, 0.5, 0.5] })
    }

    /// Small checker sphere off the rotation centre, toward the azimuth-0
    /// camera, so that azimuth changes move it across the image.
    pub fn toy_object() -> Self {
        Self::new(vec![Primitive {
            shape: Shape::Sphere {
                center: [0.0, 0.0, -0.3],
                radius: 0.15,
            },
            texture: Texture::Checker {
                scale: 0.1,
                colors: [[0.15, 0.25, 0.35], [0.85, 0.75, 0.6]],
            },
        }])
        .expect("preset is valid")
    }

    fn sphere_with(texture: Texture) -> Self {
        Self::new(vec![Primitive {
            shape: Shape::Sphere {
                center: [0.0, 0.0, 0.0],
                radius: 0.3,
            },
            texture,
        }])
        .expect("preset is valid")
    }

    /// A half-width occluder at world `z = -0.2` covering `x < 0` in front of
    /// a wall at `z = 0.3`.
    pub fn two_planes() -> Self {
        let checker = |colors| Texture::Checker { scale: 0.08, colors };
        Self::new(vec![
            Primitive {
                shape: Shape::Plane {
                    point: [0.0, 0.0, 0.3],
                    normal: [0.0, 0.0, -1.0],
                    extent: [5.0, 5.0],
                },
                texture: checker([[0.2, 0.2, 0.6], [0.7, 0.7, 0.9]]),
            },
            Primitive {
                shape: Shape::Plane {
                    point: [-1.0, 0.0, -0.2],
                    normal: [0.0, 0.0, -1.0],
                    extent: [1.0, 5.0],
                },
                texture: checker([[0.6, 0.2, 0.1], [0.95, 0.8, 0.3]]),
            },
        ])
        .expect("preset is valid")
    }

    /// Nearest hit along `origin + t * dir` with `t > 0`.
    pub fn intersect(&self, origin: &Point3<f64>, dir: &Vector3<f64>) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        for (i, p) in self.primitives.iter().enumerate() {
            if let Some(t) = intersect_shape(&p.shape, origin, dir) {
                if best.is_none_or(|b| t < b.t) {
                    best = Some(Hit { t, primitive: i });
                }
            }
        }
        best
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub t: f64,
    pub primitive: usize,
}

const T_MIN: f64 = 1e-9;

fn intersect_shape(shape: &Shape, o: &Point3<f64>, d: &Vector3<f64>) -> Option<f64> {
    match shape {
        Shape::Sphere { center, radius } => {
            let oc = o - Point3::from(*center);
            let a = d.norm_squared();
            let b = oc.dot(d);
            let c = oc.norm_squared() - radius * radius;
            let disc = b * b - a * c;
            if disc < 0.0 {
                return None;
            }
            let sq = disc.sqrt();
            // numerically stable pair of roots
            let q = -(b + b.signum() * sq);
            let (r1, r2) = if q == 0.0 { (0.0, 0.0) } else { (q / a, c / q) };
            let (t0, t1) = if r1 < r2 { (r1, r2) } else { (r2, r1) };
            [t0, t1].into_iter().find(|&t| t > T_MIN)
        }
        Shape::Box { center, half_extents } => {
            let (mut tn, mut tf) = (f64::NEG_INFINITY, f64::INFINITY);
            for k in 0..3 {
                let lo = center[k] - half_extents[k];
                let hi = center[k] + half_extents[k];
                if d[k] == 0.0 {
                    if o[k] < lo || o[k] > hi {
                        return None;
                    }
                    continue;
                }
                let (a, b) = ((lo - o[k]) / d[k], (hi - o[k]) / d[k]);
                tn = tn.max(a.min(b));
                tf = tf.min(a.max(b));
            }
            if tn > tf {
                return None;
            }
            [tn, tf].into_iter().find(|&t| t > T_MIN)
        }
        Shape::Plane { point, normal, extent } => {
            let n = Vector3::from(*normal).normalize();
            let denom = n.dot(d);
            if denom == 0.0 {
                return None;
            }
            let p0 = Point3::from(*point);
            let t = n.dot(&(p0 - o)) / denom;
            if t <= T_MIN {
                return None;
            }
            let (u, v) = plane_axes(&n);
            let rel = o + d * t - p0;
            (rel.dot(&u).abs() <= extent[0] && rel.dot(&v).abs() <= extent[1]).then_some(t)
        }
    }
}

/// In-plane axes for a plane with unit normal `n`.
pub fn plane_axes(n: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let helper = if n.y.abs() > 0.9 { Vector3::x() } else { Vector3::y() };
    let u = helper.cross(n).normalize();
    (u, n.cross(&u))
}

/// Renderer camera: world-space centre plus camera→world rotation.
struct RayCamera {
    k: CameraIntrinsics,
    center: Point3<f64>,
    cam_to_world: RigidTransform,
}

impl RayCamera {
    fn new(k: &CameraIntrinsics, pose: &CameraPose) -> Self {
        Self {
            k: *k,
            center: pose.center(),
            cam_to_world: pose.extrinsics().inverse(),
        }
    }

    /// World ray direction through pixel `(x, y)` scaled so that the ray
    /// parameter equals camera depth.
    fn ray(&self, x: f64, y: f64) -> Vector3<f64> {
        self.cam_to_world.rotation * self.k.unproject(x, y, 1.0)
    }
}

/// Rendered view plus per-pixel hit information.
#[derive(Debug, Clone)]
pub struct Render {
    pub image: RgbdImage,
    /// Index of the primitive hit by the centre ray, `None` for background.
    pub hit: Vec<Option<usize>>,
}

impl Render {
    pub fn foreground(&self) -> Vec<bool> {
        self.hit.iter().map(Option::is_some).collect()
    }
}

pub fn render(
    scene: &Scene,
    k: &CameraIntrinsics,
    pose: &CameraPose,
    width: usize,
    height: usize,
    supersample: usize,
) -> Result<Render> {
    scene.validate()?;
    if supersample == 0 {
        return Err(Error::invalid("supersample", "must be at least 1"));
    }
    let cam = RayCamera::new(k, pose);
    let s = supersample;
    let rows: Vec<(Vec<f64>, Vec<f64>, Vec<Option<usize>>)> = (0..height)
        .into_par_iter()
        .map(|y| {
            let mut rgb = Vec::with_capacity(width * 3);
            let mut depth = Vec::with_capacity(width);
            let mut hits = Vec::with_capacity(width);
            for x in 0..width {
                let centre = scene.intersect(&cam.center, &cam.ray(x as f64, y as f64));
                depth.push(centre.map_or(scene.far_depth, |h| h.t));
                hits.push(centre.map(|h| h.primitive));
                let mut acc = [0.0; 3];
                for j in 0..s {
                    for i in 0..s {
                        let ox = (i as f64 + 0.5) / s as f64 - 0.5;
                        let oy = (j as f64 + 0.5) / s as f64 - 0.5;
                        let dir = cam.ray(x as f64 + ox, y as f64 + oy);
                        let c = match scene.intersect(&cam.center, &dir) {
                            Some(h) => scene.primitives[h.primitive].texture.albedo(&(cam.center + dir * h.t)),
                            None => scene.background,
                        };
                        for ch in 0..3 {
                            acc[ch] += c[ch];
                        }
                    }
                }
                let n = (s * s) as f64;
                rgb.extend(acc.iter().map(|a| (a / n).clamp(0.0, 1.0)));
            }
            (rgb, depth, hits)
        })
        .collect();
    let mut rgb = Vec::with_capacity(width * height * 3);
    let mut depth = Vec::with_capacity(width * height);
    let mut hit = Vec::with_capacity(width * height);
    for (r, d, h) in rows {
        rgb.extend(r);
        depth.extend(d);
        hit.extend(h);
    }
    Ok(Render {
        image: RgbdImage::new(width, height, rgb, depth)?,
        hit,
    })
}

pub fn render_rgbd(
    scene: &Scene,
    k: &CameraIntrinsics,
    pose: &CameraPose,
    width: usize,
    height: usize,
    supersample: usize,
) -> Result<RgbdImage> {
    Ok(render(scene, k, pose, width, height, supersample)?.image)
}

const VISIBILITY_TOL: f64 = 1e-6;

/// For each view-1 pixel: whether its surface point is the nearest surface
/// along the view-2 ray through its projection. Background pixels and points
/// projecting outside view 2 are `false`.
pub fn occlusion_ground_truth(
    scene: &Scene,
    k: &CameraIntrinsics,
    pose1: &CameraPose,
    pose2: &CameraPose,
    width: usize,
    height: usize,
) -> Result<Vec<bool>> {
    scene.validate()?;
    let cam1 = RayCamera::new(k, pose1);
    let cam2 = RayCamera::new(k, pose2);
    let e2 = pose2.extrinsics();
    let flags = (0..width * height)
        .into_par_iter()
        .map(|i| {
            let (x, y) = ((i % width) as f64, (i / width) as f64);
            let dir = cam1.ray(x, y);
            let Some(hit) = scene.intersect(&cam1.center, &dir) else {
                return false;
            };
            let p = cam1.center + dir * hit.t;
            let q = e2.apply(&p.coords);
            if q.z <= 0.0 {
                return false;
            }
            let (u, v) = k.project(&q);
            if !in_bounds(u, v, width, height) {
                return false;
            }
            match scene.intersect(&cam2.center, &cam2.ray(u, v)) {
                Some(h2) => h2.t >= q.z - VISIBILITY_TOL * q.z.max(1.0),
                None => true,
            }
        })
        .collect();
    Ok(flags)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::unproject;

    fn k64() -> CameraIntrinsics {
        CameraIntrinsics::from_image_size(64).unwrap()
    }

    fn frontal() -> CameraPose {
        CameraPose::new(0.0, 0.0, 1.0).unwrap()
    }

    #[test]
    fn fronto_parallel_plane_has_constant_depth() {
        let scene = Scene::new(vec![Primitive {
            shape: Shape::Plane {
                point: [0.0, 0.0, -0.5],
                normal: [0.0, 0.0, 1.0],
                extent: [10.0, 10.0],
            },
            texture: Texture::Solid { color: [0.3; 3] },
        }])
        .unwrap();
        let img = render_rgbd(&scene, &k64(), &frontal(), 64, 64, 1).unwrap();
        for &d in img.depth() {
            assert!((d - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn sphere_centre_depth() {
        let img = render_rgbd(&Scene::checker_sphere(), &k64(), &frontal(), 64, 64, 1).unwrap();
        assert!((img.depth_at(32, 32) - 0.7).abs() < 1e-12);
    }

    #[test]
    fn background_gets_far_depth_and_colour() {
        let mut scene = Scene::checker_sphere();
        scene.background = [0.0, 1.0, 0.0];
        scene.far_depth = 1.75;
        let r = render(&scene, &k64(), &frontal(), 64, 64, 2).unwrap();
        assert_eq!(r.hit[0], None);
        assert_eq!(r.image.depth_at(0, 0), 1.75);
        assert_eq!(r.image.color_at(0, 0), [0.0, 1.0, 0.0]);
    }

    /// Sphere tracing on the scene's signed distance, refined by bisection.
    fn ray_march(scene: &Scene, o: &Point3<f64>, d: &Vector3<f64>) -> Option<f64> {
        let len = d.norm();
        let dir = d / len;
        let sdf = |p: &Point3<f64>| {
            scene
                .primitives
                .iter()
                .map(|pr| match &pr.shape {
                    Shape::Sphere { center, radius } => (p - Point3::from(*center)).norm() - radius,
                    Shape::Box { center, half_extents } => {
                        let q = (p - Point3::from(*center)).abs() - Vector3::from(*half_extents);
                        q.map(|v| v.max(0.0)).norm() + q.max().min(0.0)
                    }
                    Shape::Plane { .. } => unreachable!("marcher covers closed shapes"),
                })
                .fold(f64::INFINITY, f64::min)
        };
        let mut s = 0.0;
        for _ in 0..10_000 {
            let dist = sdf(&(o + dir * s));
            if dist < 1e-4 {
                // bracket the crossing and bisect on the sign
                let (mut lo, mut hi) = ((s - 2e-4).max(0.0), s + 2e-4);
                while sdf(&(o + dir * hi)) > 0.0 {
                    hi += 1e-4;
                }
                for _ in 0..100 {
                    let mid = 0.5 * (lo + hi);
                    if sdf(&(o + dir * mid)) > 0.0 {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                return Some(0.5 * (lo + hi) / len);
            }
            s += dist;
            if s > 10.0 {
                return None;
            }
        }
        None
    }

    #[test]
    fn depth_matches_ray_march_root_finder() {
        let scene = Scene::new(vec![
            Primitive {
                shape: Shape::Sphere {
                    center: [0.05, -0.02, 0.0],
                    radius: 0.18,
                },
                texture: Texture::Solid { color: [0.5; 3] },
            },
            Primitive {
                shape: Shape::Box {
                    center: [-0.12, 0.1, -0.1],
                    half_extents: [0.06, 0.04, 0.05],
                },
                texture: Texture::Solid { color: [0.2; 3] },
            },
        ])
        .unwrap();
        let k = CameraIntrinsics::from_image_size(24).unwrap();
        let pose = CameraPose::from_degrees(20.0, 10.0, 1.0).unwrap();
        let r = render(&scene, &k, &pose, 24, 24, 1).unwrap();
        let cam = RayCamera::new(&k, &pose);
        let mut compared = 0;
        for y in 0..24 {
            for x in 0..24 {
                let dir = cam.ray(x as f64, y as f64);
                let march = ray_march(&scene, &cam.center, &dir);
                match (r.hit[y * 24 + x], march) {
                    (Some(_), Some(t)) => {
                        assert!((r.image.depth_at(x, y) - t).abs() < 1e-6, "pixel ({x},{y})");
                        compared += 1;
                    }
                    (None, None) => {}
                    // grazing rays can disagree on hit/miss
                    _ => {}
                }
            }
        }
        assert!(compared > 100);
    }

    #[test]
    fn unprojected_points_satisfy_sphere_equation() {
        let r = render(&Scene::checker_sphere(), &k64(), &CameraPose::from_degrees(30.0, -10.0, 1.0).unwrap(), 64, 64, 1)
            .unwrap();
        let un = unproject(&r.image, &k64(), &CameraPose::from_degrees(30.0, -10.0, 1.0).unwrap().extrinsics());
        for (p, &pix) in un.cloud.points.iter().zip(&un.pixels) {
            if r.hit[pix].is_some() {
                assert!((p.norm() - 0.3).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn rendering_is_deterministic() {
        let p = CameraPose::from_degrees(12.0, 5.0, 1.0).unwrap();
        let a = render_rgbd(&Scene::checker_sphere(), &k64(), &p, 64, 64, 3).unwrap();
        let b = render_rgbd(&Scene::checker_sphere(), &k64(), &p, 64, 64, 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn supersampling_converges_on_checker() {
        let p = CameraPose::from_degrees(7.0, 3.0, 1.0).unwrap();
        let reference = render_rgbd(&Scene::checker_sphere(), &k64(), &p, 64, 64, 16).unwrap();
        let err = |s| {
            let img = render_rgbd(&Scene::checker_sphere(), &k64(), &p, 64, 64, s).unwrap();
            img.rgb().iter().zip(reference.rgb()).map(|(a, b)| (a - b).abs()).sum::<f64>() / img.rgb().len() as f64
        };
        let errs: Vec<f64> = [1, 2, 4, 8].into_iter().map(err).collect();
        for w in errs.windows(2) {
            assert!(w[1] < w[0], "{errs:?}");
        }
    }

    #[test]
    fn same_pose_sees_every_hit_pixel() {
        let p = CameraPose::from_degrees(10.0, 0.0, 1.0).unwrap();
        let scene = Scene::checker_sphere();
        let r = render(&scene, &k64(), &p, 64, 64, 1).unwrap();
        let vis = occlusion_ground_truth(&scene, &k64(), &p, &p, 64, 64).unwrap();
        assert_eq!(vis, r.foreground());
    }

    #[test]
    fn sphere_crescent_matches_cap_condition() {
        // From a camera at unit distance, a point with outward normal n on a
        // sphere of radius r at the origin is visible iff n . c_hat > r.
        let scene = Scene::new(vec![Primitive {
            shape: Shape::Sphere {
                center: [0.0; 3],
                radius: 0.2,
            },
            texture: Texture::Solid { color: [0.5; 3] },
        }])
        .unwrap();
        let k = CameraIntrinsics::from_image_size(128).unwrap();
        let (p1, p2) = (frontal(), CameraPose::from_degrees(15.0, 0.0, 1.0).unwrap());
        let vis = occlusion_ground_truth(&scene, &k, &p1, &p2, 128, 128).unwrap();
        let r = render(&scene, &k, &p1, 128, 128, 1).unwrap();
        let hidden = (0..128 * 128).filter(|&i| r.hit[i].is_some() && !vis[i]).count();

        // analytic area on a 16x finer image-plane lattice
        let c1 = p1.center().coords;
        let c2 = p2.center().coords.normalize();
        let e1 = p1.extrinsics().inverse();
        let n = 8;
        let mut area = 0.0;
        for yy in 0..128 * n {
            for xx in 0..128 * n {
                let x = (xx as f64 + 0.5) / n as f64 - 0.5;
                let y = (yy as f64 + 0.5) / n as f64 - 0.5;
                let d = e1.rotation * k.unproject(x, y, 1.0);
                let (a, b, c) = (d.norm_squared(), c1.dot(&d), c1.norm_squared() - 0.04);
                let disc = b * b - a * c;
                if disc < 0.0 {
                    continue;
                }
                let t = (-b - disc.sqrt()) / a;
                let normal = (c1 + d * t) / 0.2;
                if normal.dot(&c2) <= 0.2 {
                    area += 1.0 / (n * n) as f64;
                }
            }
        }
        assert!(area > 100.0, "crescent too small to measure: {area}");
        assert!(((hidden as f64) - area).abs() / area < 0.02, "hidden {hidden} analytic {area}");
    }

    #[test]
    fn two_plane_shadow_edge_matches_closed_form() {
        let scene = Scene::two_planes();
        let k = k64();
        let (p1, p2) = (frontal(), CameraPose::from_degrees(-15.0, 0.0, 1.0).unwrap());
        let vis = occlusion_ground_truth(&scene, &k, &p1, &p2, 64, 64).unwrap();
        // The segment from c2 to wall point (X, Y, 0.3) crosses the occluder
        // plane z = -0.2 at fraction s; it is blocked iff the crossing has x < 0.
        let c2 = p2.center();
        let s = (-0.2 - c2.z) / (0.3 - c2.z);
        let x_star = c2.x * (1.0 - 1.0 / s);
        // view 1 sees world x as -x_cam; wall depth is 1.3
        let u_star = k.cx - k.fx * x_star / 1.3;
        assert!(u_star > 10.0 && u_star < 25.0, "{u_star}");
        for y in 0..64 {
            for x in 0..32 {
                if (x as f64 - u_star).abs() <= 1.0 {
                    continue;
                }
                assert_eq!(vis[y * 64 + x], (x as f64) < u_star, "pixel ({x},{y})");
            }
        }
    }

    #[test]
    fn scene_json_round_trip_and_validation() {
        let s = Scene::two_planes();
        let json = serde_json::to_string(&s).unwrap();
        assert!(json.contains("\"kind\":\"plane\""));
        let back: Scene = serde_json::from_str(&json).unwrap();
        assert_eq!(back, s);
        let bad = r#"{"primitives":[{"shape":{"kind":"sphere","center":[0,0,0],"radius":-1},"texture":{"kind":"solid","color":[0,0,0]}}]}"#;
        let parsed: Scene = serde_json::from_str(bad).unwrap();
        assert!(parsed.validate().is_err());
        assert!(serde_json::from_str::<Scene>(r#"{"primitives":[],"extra":1}"#).is_err());
    }
}
