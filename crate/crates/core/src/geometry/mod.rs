//! Projection, unprojection, warp fields, bilinear sampling, occlusion masks
//! and normal maps.
//!
//! Pixel centres sit on integer coordinates: pixel `(0, 0)` is at `(0.0, 0.0)`
//! and images are stored row-major with `index = y * width + x`.

mod normals;
mod warp;

use nalgebra::Vector3;

use crate::camera::{CameraIntrinsics, RigidTransform};
use crate::error::{Error, Result};

pub use crate::io::{export_ply, read_ply, write_ply};
pub use normals::normal_map;
pub(crate) use warp::in_bounds;
pub use warp::{
    bilinear_sample, compute_warp_field, occlusion_mask, warp_basis, warp_field_var, warp_image, OcclusionMask, WarpBasis,
    WarpField, WarpVars, WarpedView,
};

/// Colour plus camera-space depth per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbdImage {
    width: usize,
    height: usize,
    rgb: Vec<f64>,
    depth: Vec<f64>,
}

impl RgbdImage {
    /// `rgb` is `height * width * 3` values in `[0, 1]`; `depth` is
    /// `height * width` finite values.
    pub fn new(width: usize, height: usize, rgb: Vec<f64>, depth: Vec<f64>) -> Result<Self> {
        if width < 2 || height < 2 {
            return Err(Error::invalid("rgbd image", format!("size {width}x{height} below 2x2")));
        }
        let n = width * height;
        if rgb.len() != 3 * n || depth.len() != n {
            return Err(Error::ShapeMismatch {
                op: "rgbd image",
                lhs: vec![height, width, 3],
                rhs: vec![rgb.len(), depth.len()],
            });
        }
        if let Some(d) = depth.iter().find(|d| !d.is_finite()) {
            return Err(Error::invalid("rgbd image", format!("non-finite depth {d}")));
        }
        if let Some(c) = rgb.iter().find(|c| !(0.0..=1.0).contains(*c)) {
            return Err(Error::invalid("rgbd image", format!("colour {c} outside [0, 1]")));
        }
        Ok(Self {
            width,
            height,
            rgb,
            depth,
        })
    }

    /// Constant colour and depth.
    pub fn uniform(width: usize, height: usize, rgb: [f64; 3], depth: f64) -> Result<Self> {
        let n = width * height;
        let colors = rgb.iter().copied().cycle().take(3 * n).collect();
        Self::new(width, height, colors, vec![depth; n])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn rgb(&self) -> &[f64] {
        &self.rgb
    }

    pub fn depth(&self) -> &[f64] {
        &self.depth
    }

    pub fn color_at(&self, x: usize, y: usize) -> [f64; 3] {
        let i = 3 * (y * self.width + x);
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }

    pub fn depth_at(&self, x: usize, y: usize) -> f64 {
        self.depth[y * self.width + x]
    }

    /// Same colours, new depth map.
    pub fn with_depth(&self, depth: Vec<f64>) -> Result<Self> {
        Self::new(self.width, self.height, self.rgb.clone(), depth)
    }

    /// `(min, max)` of the depth map.
    pub fn depth_range(&self) -> (f64, f64) {
        self.depth
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &d| (lo.min(d), hi.max(d)))
    }

    pub fn into_parts(self) -> (usize, usize, Vec<f64>, Vec<f64>) {
        (self.width, self.height, self.rgb, self.depth)
    }
}

/// World-space points with colours.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vector3<f64>>,
    pub colors: Vec<[f64; 3]>,
}

impl PointCloud {
    pub fn new(points: Vec<Vector3<f64>>, colors: Vec<[f64; 3]>) -> Result<Self> {
        if points.len() != colors.len() {
            return Err(Error::ShapeMismatch {
                op: "point cloud",
                lhs: vec![points.len(), 3],
                rhs: vec![colors.len(), 3],
            });
        }
        if points.iter().any(|p| !p.iter().all(|v| v.is_finite())) {
            return Err(Error::invalid("point cloud", "non-finite point"));
        }
        Ok(Self { points, colors })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Points recovered from an RGBD image.
#[derive(Debug, Clone)]
pub struct Unprojection {
    pub cloud: PointCloud,
    /// Row-major pixel index of each point.
    pub pixels: Vec<usize>,
    /// Pixels dropped for non-positive depth.
    pub skipped: usize,
}

/// Lifts every pixel with positive depth to world space:
/// `p_world = Rᵀ (K⁻¹ · D · p − t)`.
pub fn unproject(img: &RgbdImage, k: &CameraIntrinsics, extrinsics: &RigidTransform) -> Unprojection {
    let cam_to_world = extrinsics.inverse();
    let mut points = Vec::with_capacity(img.pixel_count());
    let mut colors = Vec::with_capacity(img.pixel_count());
    let mut pixels = Vec::with_capacity(img.pixel_count());
    let mut skipped = 0;
    for y in 0..img.height {
        for x in 0..img.width {
            let d = img.depth_at(x, y);
            if d <= 0.0 {
                skipped += 1;
                continue;
            }
            let cam = k.unproject(x as f64, y as f64, d);
            points.push(cam_to_world.apply(&cam));
            colors.push(img.color_at(x, y));
            pixels.push(y * img.width + x);
        }
    }
    Unprojection {
        cloud: PointCloud { points, colors },
        pixels,
        skipped,
    }
}

/// Pixel coordinates and camera depths of projected points.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub coords: Vec<[f64; 2]>,
    pub depths: Vec<f64>,
    /// False for points at or behind the camera plane.
    pub valid: Vec<bool>,
}

pub fn project_points(pc: &PointCloud, k: &CameraIntrinsics, extrinsics: &RigidTransform) -> Projection {
    let mut out = Projection {
        coords: Vec::with_capacity(pc.len()),
        depths: Vec::with_capacity(pc.len()),
        valid: Vec::with_capacity(pc.len()),
    };
    for p in &pc.points {
        let cam = extrinsics.apply(p);
        let ok = cam.z > 0.0;
        let (u, v) = if ok { k.project(&cam) } else { (f64::NAN, f64::NAN) };
        out.coords.push([u, v]);
        out.depths.push(cam.z);
        out.valid.push(ok);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::CameraPose;
    use approx::assert_abs_diff_eq;
    use nalgebra::Matrix4;
    use proptest::prelude::*;

    #[test]
    fn image_validation() {
        assert!(RgbdImage::uniform(1, 4, [0.0; 3], 1.0).is_err());
        assert!(RgbdImage::new(2, 2, vec![0.5; 12], vec![1.0, 1.0, f64::NAN, 1.0]).is_err());
        assert!(RgbdImage::new(2, 2, vec![1.5; 12], vec![1.0; 4]).is_err());
        assert!(RgbdImage::new(2, 2, vec![0.5; 11], vec![1.0; 4]).is_err());
    }

    #[test]
    fn principal_ray_unprojects_onto_axis() {
        let k = CameraIntrinsics::from_image_size(8).unwrap();
        let mut depth = vec![1.0; 64];
        depth[4 * 8 + 4] = 2.5;
        let img = RgbdImage::new(8, 8, vec![0.2; 192], depth).unwrap();
        let un = unproject(&img, &k, &RigidTransform::identity());
        let i = un.pixels.iter().position(|&p| p == 36).unwrap();
        assert_abs_diff_eq!(un.cloud.points[i], Vector3::new(0.0, 0.0, 2.5), epsilon = 1e-15);
    }

    #[test]
    fn nonpositive_depth_is_skipped() {
        let k = CameraIntrinsics::from_image_size(4).unwrap();
        let mut depth = vec![1.0; 16];
        depth[0] = 0.0;
        depth[5] = -1.0;
        let img = RgbdImage::new(4, 4, vec![0.0; 48], depth).unwrap();
        let un = unproject(&img, &k, &RigidTransform::identity());
        assert_eq!(un.skipped, 2);
        assert_eq!(un.cloud.len(), 14);
    }

    #[test]
    fn origin_projects_to_principal_point() {
        let k = CameraIntrinsics::from_image_size(64).unwrap();
        let e = CameraPose::new(0.0, 0.0, 1.0).unwrap().extrinsics();
        let pc = PointCloud::new(vec![Vector3::zeros(), Vector3::new(0.0, 0.0, -2.0)], vec![[0.0; 3]; 2]).unwrap();
        let pr = project_points(&pc, &k, &e);
        assert_eq!(pr.coords[0], [32.0, 32.0]);
        assert_eq!(pr.depths[0], 1.0);
        assert!(pr.valid[0]);
        assert!(!pr.valid[1], "point behind camera");
    }

    fn homogeneous_reference(p: &Vector3<f64>, k: &CameraIntrinsics, e: &RigidTransform) -> (f64, f64, f64) {
        let mut kh = Matrix4::identity();
        kh.fixed_view_mut::<3, 3>(0, 0).copy_from(&k.matrix());
        let x = kh * e.to_homogeneous() * p.push(1.0);
        (x[0] / x[2], x[1] / x[2], x[2])
    }

    proptest! {
        #[test]
        fn projection_matches_homogeneous_matrix(
            a in -3.0f64..3.0, el in -1.4f64..1.4, d in 0.5f64..3.0,
            px in -1.0f64..1.0, py in -1.0f64..1.0, pz in -1.0f64..1.0,
        ) {
            let k = CameraIntrinsics::from_image_size(64).unwrap();
            let e = CameraPose::new(a, el, d).unwrap().extrinsics();
            let p = Vector3::new(px, py, pz);
            let pr = project_points(&PointCloud::new(vec![p], vec![[0.0; 3]]).unwrap(), &k, &e);
            let (u, v, z) = homogeneous_reference(&p, &k, &e);
            prop_assert!((pr.depths[0] - z).abs() < 1e-9);
            if z > 1e-3 {
                prop_assert!(pr.valid[0]);
                prop_assert!((pr.coords[0][0] - u).abs() < 1e-9 * (1.0 + u.abs()));
                prop_assert!((pr.coords[0][1] - v).abs() < 1e-9 * (1.0 + v.abs()));
            }
        }

        #[test]
        fn unproject_then_project_round_trips(
            a in -3.0f64..3.0, el in -1.4f64..1.4, d in 0.5f64..3.0,
            seed in proptest::collection::vec(0.2f64..4.0, 16),
        ) {
            let k = CameraIntrinsics::from_image_size(4).unwrap();
            let e = CameraPose::new(a, el, d).unwrap().extrinsics();
            let img = RgbdImage::new(4, 4, vec![0.5; 48], seed.clone()).unwrap();
            let un = unproject(&img, &k, &e);
            let pr = project_points(&un.cloud, &k, &e);
            for (i, &pix) in un.pixels.iter().enumerate() {
                let (x, y) = ((pix % 4) as f64, (pix / 4) as f64);
                prop_assert!((pr.coords[i][0] - x).abs() < 1e-6);
                prop_assert!((pr.coords[i][1] - y).abs() < 1e-6);
                prop_assert!((pr.depths[i] - seed[pix]).abs() < 1e-9);
            }
        }
    }
}
