//! Cross-view consistency scores V_depth and V_color.
//!
//! Surface points of every view are expressed in polar coordinates about a
//! fixed origin, binned by azimuth and elevation, reduced to the nearest
//! point per cell and view, and compared across views.
//!
//! Angles are measured in the metric frame: the world turned 180° about +y,
//! so that the azimuth-0 camera lies on the metric +z axis. With `v` the
//! offset from the origin in that frame, azimuth is `atan2(v.x, v.z)`,
//! elevation `atan2(v.y, sqrt(v.x² + v.z²))` and the radial coordinate `|v|`.

use std::collections::BTreeMap;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::camera::{CameraIntrinsics, CameraPose};
use crate::error::{Error, Result};
use crate::geometry::{unproject, PointCloud, RgbdImage};

pub const DEFAULT_BINS: usize = 128;
pub const WHITE_THRESHOLD: f64 = 0.95;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CellConfigDegrees", into = "CellConfigDegrees")]
pub struct PolarCellConfig {
    /// Metric-frame origin.
    pub origin: [f64; 3],
    pub azimuth_min: f64,
    pub azimuth_max: f64,
    pub elevation_min: f64,
    pub elevation_max: f64,
    pub bins_azimuth: usize,
    pub bins_elevation: usize,
    /// Drop points whose colour channels all exceed [`WHITE_THRESHOLD`].
    pub white_filter: bool,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CellConfigDegrees {
    origin: [f64; 3],
    azimuth_min_deg: f64,
    azimuth_max_deg: f64,
    elevation_min_deg: f64,
    elevation_max_deg: f64,
    #[serde(default = "default_bins")]
    bins_azimuth: usize,
    #[serde(default = "default_bins")]
    bins_elevation: usize,
    #[serde(default)]
    white_filter: bool,
}

fn default_bins() -> usize {
    DEFAULT_BINS
}

impl TryFrom<CellConfigDegrees> for PolarCellConfig {
    type Error = Error;

    fn try_from(c: CellConfigDegrees) -> Result<Self> {
        let cfg = PolarCellConfig {
            origin: c.origin,
            azimuth_min: c.azimuth_min_deg.to_radians(),
            azimuth_max: c.azimuth_max_deg.to_radians(),
            elevation_min: c.elevation_min_deg.to_radians(),
            elevation_max: c.elevation_max_deg.to_radians(),
            bins_azimuth: c.bins_azimuth,
            bins_elevation: c.bins_elevation,
            white_filter: c.white_filter,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

impl From<PolarCellConfig> for CellConfigDegrees {
    fn from(c: PolarCellConfig) -> Self {
        CellConfigDegrees {
            origin: c.origin,
            azimuth_min_deg: c.azimuth_min.to_degrees(),
            azimuth_max_deg: c.azimuth_max.to_degrees(),
            elevation_min_deg: c.elevation_min.to_degrees(),
            elevation_max_deg: c.elevation_max.to_degrees(),
            bins_azimuth: c.bins_azimuth,
            bins_elevation: c.bins_elevation,
            white_filter: c.white_filter,
        }
    }
}

impl PolarCellConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.azimuth_min < self.azimuth_max) || !(self.elevation_min < self.elevation_max) {
            return Err(Error::invalid("polar cell config", "each angular range needs min < max"));
        }
        if self.bins_azimuth == 0 || self.bins_elevation == 0 {
            return Err(Error::invalid("polar cell config", "bin counts must be at least 1"));
        }
        if self.origin.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("polar cell config", "non-finite origin"));
        }
        Ok(())
    }

    /// Origin (0, 0, -0.5), ±23° on both axes.
    pub fn face(bins: usize) -> Self {
        let a = 23f64.to_radians();
        PolarCellConfig {
            origin: [0.0, 0.0, -0.5],
            azimuth_min: -a,
            azimuth_max: a,
            elevation_min: -a,
            elevation_max: a,
            bins_azimuth: bins,
            bins_elevation: bins,
            white_filter: false,
        }
    }

    /// Origin at zero, full sphere, white background ignored.
    pub fn car(bins: usize) -> Self {
        PolarCellConfig {
            origin: [0.0, 0.0, 0.0],
            azimuth_min: -180f64.to_radians(),
            azimuth_max: 180f64.to_radians(),
            elevation_min: -90f64.to_radians(),
            elevation_max: 90f64.to_radians(),
            bins_azimuth: bins,
            bins_elevation: bins,
            white_filter: true,
        }
    }

    pub fn cell_count(&self) -> usize {
        self.bins_azimuth * self.bins_elevation
    }

    pub fn azimuth_bin_width(&self) -> f64 {
        (self.azimuth_max - self.azimuth_min) / self.bins_azimuth as f64
    }
}

/// World point → metric frame (180° about +y).
pub fn to_metric_frame(p: &Vector3<f64>) -> Vector3<f64> {
    Vector3::new(-p.x, p.y, -p.z)
}

/// `(azimuth, elevation, radial)` of a world point about a metric-frame origin.
pub fn polar_coordinates(p: &Vector3<f64>, origin: &[f64; 3]) -> (f64, f64, f64) {
    let v = to_metric_frame(p) - Vector3::from(*origin);
    let az = v.x.atan2(v.z);
    let el = v.y.atan2(v.x.hypot(v.z));
    (az, el, v.norm())
}

fn bin(value: f64, lo: f64, hi: f64, bins: usize) -> Option<usize> {
    if !(lo..=hi).contains(&value) {
        return None;
    }
    let b = ((value - lo) / (hi - lo) * bins as f64).floor() as usize;
    Some(b.min(bins - 1))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellSample {
    /// `elevation_bin * bins_azimuth + azimuth_bin`.
    pub cell: usize,
    pub radial: f64,
}

/// Cell and radial coordinate per point; `None` outside the angular range.
pub fn polar_quantize(pc: &PointCloud, cfg: &PolarCellConfig) -> Vec<Option<CellSample>> {
    pc.points
        .iter()
        .map(|p| {
            let (az, el, r) = polar_coordinates(p, &cfg.origin);
            let a = bin(az, cfg.azimuth_min, cfg.azimuth_max, cfg.bins_azimuth)?;
            let e = bin(el, cfg.elevation_min, cfg.elevation_max, cfg.bins_elevation)?;
            Some(CellSample {
                cell: e * cfg.bins_azimuth + a,
                radial: r,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellValue {
    pub radial: f64,
    pub color: [f64; 3],
}

/// Nearest (minimum-radial) point per populated cell of one view. Ties keep
/// the first point.
pub fn reduce_view_cells(samples: &[Option<CellSample>], colors: &[[f64; 3]]) -> BTreeMap<usize, CellValue> {
    let mut cells: BTreeMap<usize, CellValue> = BTreeMap::new();
    for (s, c) in samples.iter().zip(colors) {
        let Some(s) = s else { continue };
        let entry = cells.entry(s.cell).or_insert(CellValue {
            radial: f64::INFINITY,
            color: *c,
        });
        if s.radial < entry.radial {
            *entry = CellValue {
                radial: s.radial,
                color: *c,
            };
        }
    }
    cells
}

#[derive(Debug, Clone, PartialEq)]
pub struct View {
    pub image: RgbdImage,
    pub pose: CameraPose,
}

/// Views generated from one latent code.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewSet {
    pub latent_id: String,
    pub views: Vec<View>,
}

impl ViewSet {
    pub fn new(latent_id: impl Into<String>, views: Vec<View>) -> Result<Self> {
        if views.len() < 2 {
            return Err(Error::invalid("view set", format!("needs at least 2 views, got {}", views.len())));
        }
        let (w, h) = (views[0].image.width(), views[0].image.height());
        if views.iter().any(|v| v.image.width() != w || v.image.height() != h) {
            return Err(Error::invalid("view set", "images differ in size"));
        }
        Ok(Self {
            latent_id: latent_id.into(),
            views,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyScores {
    pub v_depth: f64,
    pub v_color: f64,
    /// Cells seen by at least two views, over all cells.
    pub populated_cell_fraction: f64,
}

/// Population variance of `values` after sorting, so the result does not
/// depend on input order.
fn population_variance(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n
}

/// Reduced cells of one view.
pub fn view_cells(view: &View, k: &CameraIntrinsics, cfg: &PolarCellConfig) -> BTreeMap<usize, CellValue> {
    let mut cloud = unproject(&view.image, k, &view.pose.extrinsics()).cloud;
    if cfg.white_filter {
        let keep: Vec<bool> = cloud.colors.iter().map(|c| !c.iter().all(|&v| v > WHITE_THRESHOLD)).collect();
        let mut it = keep.iter();
        cloud.points.retain(|_| *it.next().expect("same length"));
        let mut it = keep.iter();
        cloud.colors.retain(|_| *it.next().expect("same length"));
    }
    reduce_view_cells(&polar_quantize(&cloud, cfg), &cloud.colors)
}

pub fn consistency_scores(vs: &ViewSet, k: &CameraIntrinsics, cfg: &PolarCellConfig) -> Result<ConsistencyScores> {
    cfg.validate()?;
    let per_view: Vec<BTreeMap<usize, CellValue>> = vs.views.iter().map(|v| view_cells(v, k, cfg)).collect();
    let mut gathered: BTreeMap<usize, Vec<CellValue>> = BTreeMap::new();
    for cells in &per_view {
        for (&cell, &val) in cells {
            gathered.entry(cell).or_default().push(val);
        }
    }
    let mut depth_vars = Vec::new();
    let mut color_vars = Vec::new();
    for vals in gathered.values().filter(|v| v.len() >= 2) {
        let mut radial: Vec<f64> = vals.iter().map(|v| v.radial).collect();
        depth_vars.push(population_variance(&mut radial));
        let channel_mean = (0..3)
            .map(|c| {
                let mut ch: Vec<f64> = vals.iter().map(|v| v.color[c]).collect();
                population_variance(&mut ch)
            })
            .sum::<f64>()
            / 3.0;
        color_vars.push(channel_mean);
    }
    if depth_vars.is_empty() {
        return Err(Error::InsufficientOverlap);
    }
    let n = depth_vars.len() as f64;
    Ok(ConsistencyScores {
        v_depth: crate::autodiff::pairwise_sum(&depth_vars) / n,
        v_color: crate::autodiff::pairwise_sum(&color_vars) / n,
        populated_cell_fraction: n / cfg.cell_count() as f64,
    })
}

/// Loads every view triplet in `dir` and groups them by latent id.
/// Latents with a single view are skipped.
pub fn load_view_sets(dir: &std::path::Path) -> Result<Vec<ViewSet>> {
    let mut groups: BTreeMap<String, Vec<View>> = BTreeMap::new();
    for prefix in crate::io::list_views(dir)? {
        let (image, meta) = crate::io::read_view(&prefix)?;
        groups.entry(meta.latent_id).or_default().push(View { image, pose: meta.pose });
    }
    let mut sets = Vec::new();
    for (id, views) in groups {
        if views.len() < 2 {
            log::warn!("latent {id}: single view skipped");
            continue;
        }
        sets.push(ViewSet::new(id, views)?);
    }
    Ok(sets)
}

/// Flat mean over view sets.
pub fn mean_scores(scores: &[ConsistencyScores]) -> Option<ConsistencyScores> {
    if scores.is_empty() {
        return None;
    }
    let n = scores.len() as f64;
    let avg = |f: fn(&ConsistencyScores) -> f64| scores.iter().map(f).sum::<f64>() / n;
    Some(ConsistencyScores {
        v_depth: avg(|s| s.v_depth),
        v_color: avg(|s| s.v_color),
        populated_cell_fraction: avg(|s| s.populated_cell_fraction),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{render_rgbd, Primitive, Scene, Shape, Texture};

    fn cloud(points: Vec<Vector3<f64>>) -> PointCloud {
        let n = points.len();
        PointCloud::new(points, vec![[0.5; 3]; n]).unwrap()
    }

    #[test]
    fn presets_match_constants() {
        let f = PolarCellConfig::face(DEFAULT_BINS);
        assert_eq!(f.origin, [0.0, 0.0, -0.5]);
        assert_eq!((f.azimuth_min, f.azimuth_max), (-23f64.to_radians(), 23f64.to_radians()));
        assert_eq!((f.elevation_min, f.elevation_max), (-23f64.to_radians(), 23f64.to_radians()));
        let c = PolarCellConfig::car(DEFAULT_BINS);
        assert_eq!(c.origin, [0.0; 3]);
        assert_eq!((c.azimuth_min, c.azimuth_max), (-std::f64::consts::PI, std::f64::consts::PI));
        assert_eq!((c.elevation_min, c.elevation_max), (-std::f64::consts::FRAC_PI_2, std::f64::consts::FRAC_PI_2));
        assert!(c.white_filter && !f.white_filter);
    }

    #[test]
    fn config_json_uses_degrees() {
        let json = serde_json::to_string(&PolarCellConfig::face(64)).unwrap();
        assert!(json.contains("\"azimuth_max_deg\":23"));
        let back: PolarCellConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back.bins_azimuth, 64);
        assert!((back.azimuth_max - 23f64.to_radians()).abs() < 1e-15);
        let bad = r#"{"origin":[0,0,0],"azimuth_min_deg":5,"azimuth_max_deg":5,"elevation_min_deg":-1,"elevation_max_deg":1}"#;
        assert!(serde_json::from_str::<PolarCellConfig>(bad).is_err());
    }

    #[test]
    fn axis_point_lands_in_centre_cell() {
        let cfg = PolarCellConfig {
            origin: [0.0; 3],
            bins_azimuth: 5,
            bins_elevation: 5,
            ..PolarCellConfig::face(5)
        };
        // metric +z is world -z
        let q = polar_quantize(&cloud(vec![Vector3::new(0.0, 0.0, -0.7)]), &cfg);
        let s = q[0].unwrap();
        assert_eq!(s.cell, 2 * 5 + 2);
        assert!((s.radial - 0.7).abs() < 1e-15);
    }

    #[test]
    fn one_bin_rotation_moves_one_cell() {
        let cfg = PolarCellConfig {
            origin: [0.0; 3],
            ..PolarCellConfig::face(16)
        };
        let w = cfg.azimuth_bin_width();
        let start = cfg.azimuth_min + 3.5 * w;
        let point = |az: f64| {
            // metric (sin az, 0, cos az) in world coordinates
            Vector3::new(-az.sin(), 0.1, -az.cos())
        };
        let q = polar_quantize(&cloud(vec![point(start), point(start + w)]), &cfg);
        assert_eq!(q[1].unwrap().cell, q[0].unwrap().cell + 1);
        let out = polar_quantize(&cloud(vec![point(cfg.azimuth_max + 0.01)]), &cfg);
        assert!(out[0].is_none());
    }

    #[test]
    fn reduction_keeps_nearest() {
        let samples = [
            Some(CellSample { cell: 4, radial: 1.2 }),
            Some(CellSample { cell: 4, radial: 0.8 }),
            None,
            Some(CellSample { cell: 7, radial: 2.0 }),
        ];
        let colors = [[0.1; 3], [0.2; 3], [0.3; 3], [0.4; 3]];
        let cells = reduce_view_cells(&samples, &colors);
        assert_eq!(cells.len(), 2);
        assert_eq!(cells[&4], CellValue { radial: 0.8, color: [0.2; 3] });
        assert_eq!(cells[&7].radial, 2.0);
    }

    #[test]
    fn shell_front_surface_is_kept() {
        // a thin shell seen from its centre side: the near wall wins
        let cfg = PolarCellConfig {
            origin: [0.0; 3],
            ..PolarCellConfig::face(8)
        };
        let dir = Vector3::new(0.05, 0.02, -1.0).normalize();
        let pc = PointCloud::new(vec![dir * 1.3, dir * 0.9], vec![[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]]).unwrap();
        let cells = reduce_view_cells(&polar_quantize(&pc, &cfg), &pc.colors);
        let v = cells.values().next().unwrap();
        assert!((v.radial - 0.9).abs() < 1e-12);
        assert_eq!(v.color, [0.0, 0.0, 1.0]);
    }

    fn gradient_sphere() -> Scene {
        Scene::new(vec![Primitive {
            shape: Shape::Sphere {
                center: [0.0; 3],
                radius: 0.3,
            },
            texture: Texture::Gradient {
                axis: [0.6, 1.2, 0.3],
                colors: [[0.1, 0.2, 0.8], [0.9, 0.6, 0.1]],
            },
        }])
        .unwrap()
    }

    fn views(scene: &Scene, azimuths: &[f64]) -> Vec<View> {
        let k = CameraIntrinsics::from_image_size(32).unwrap();
        azimuths
            .iter()
            .map(|&a| {
                let pose = CameraPose::from_degrees(a, 0.3 * a, 1.0).unwrap();
                View {
                    image: render_rgbd(scene, &k, &pose, 32, 32, 1).unwrap(),
                    pose,
                }
            })
            .collect()
    }

    #[test]
    fn identical_views_score_zero() {
        let k = CameraIntrinsics::from_image_size(32).unwrap();
        let v = views(&gradient_sphere(), &[4.0]);
        let vs = ViewSet::new("z0", vec![v[0].clone(), v[0].clone(), v[0].clone()]).unwrap();
        let s = consistency_scores(&vs, &k, &PolarCellConfig::face(64)).unwrap();
        assert!(s.v_depth < 1e-30 && s.v_color < 1e-30, "{s:?}");
        assert!(s.populated_cell_fraction > 0.0);
    }

    #[test]
    fn order_invariance_and_duplicates() {
        let k = CameraIntrinsics::from_image_size(32).unwrap();
        let cfg = PolarCellConfig::face(64);
        let v = views(&gradient_sphere(), &[-10.0, -3.0, 2.0, 9.0]);
        let base = consistency_scores(&ViewSet::new("z", v.clone()).unwrap(), &k, &cfg).unwrap();
        let mut rev = v.clone();
        rev.reverse();
        let r = consistency_scores(&ViewSet::new("z", rev).unwrap(), &k, &cfg).unwrap();
        assert_eq!(base, r);
        for j in 0..v.len() {
            let mut dup = v.clone();
            dup.push(v[j].clone());
            let d = consistency_scores(&ViewSet::new("z", dup).unwrap(), &k, &cfg).unwrap();
            assert!(d.v_depth <= base.v_depth && d.v_color <= base.v_color, "duplicate of view {j}");
        }
    }

    #[test]
    fn insufficient_overlap() {
        let k = CameraIntrinsics::from_image_size(32).unwrap();
        let v = views(&gradient_sphere(), &[0.0, 1.0]);
        let cfg = PolarCellConfig {
            azimuth_min: 80f64.to_radians(),
            azimuth_max: 90f64.to_radians(),
            ..PolarCellConfig::face(8)
        };
        assert!(matches!(
            consistency_scores(&ViewSet::new("z", v).unwrap(), &k, &cfg),
            Err(Error::InsufficientOverlap)
        ));
        assert!(ViewSet::new("z", views(&gradient_sphere(), &[0.0])).is_err());
    }

    #[test]
    fn white_filter_drops_background() {
        let k = CameraIntrinsics::from_image_size(32).unwrap();
        let mut scene = gradient_sphere();
        scene.primitives[0].shape = Shape::Sphere {
            center: [0.0; 3],
            radius: 0.15,
        };
        let v = &views(&scene, &[0.0])[0];
        let with = view_cells(v, &k, &PolarCellConfig::car(64));
        let without = view_cells(v, &k, &PolarCellConfig { white_filter: false, ..PolarCellConfig::car(64) });
        assert!(with.len() < without.len());
        assert!(with.values().all(|c| c.radial < 0.16));
    }

    #[test]
    fn rotation_by_whole_bins_preserves_scores() {
        // rotate poses and an off-centre scene about +y by an integer number
        // of azimuth bins of a full-circle config
        let k = CameraIntrinsics::from_image_size(32).unwrap();
        let cfg = PolarCellConfig {
            white_filter: false,
            ..PolarCellConfig::car(90)
        };
        let step = 7.0 * cfg.azimuth_bin_width();
        let scene_at = |angle: f64| {
            let (s, c) = angle.sin_cos();
            let (x, z) = (0.04, 0.02);
            Scene::new(vec![Primitive {
                shape: Shape::Sphere {
                    // world rotation about +y matching a camera azimuth change
                    center: [c * x - s * z, 0.0, s * x + c * z],
                    radius: 0.25,
                },
                texture: Texture::Gradient {
                    axis: [0.0, 1.5, 0.0],
                    colors: [[0.1, 0.2, 0.8], [0.9, 0.6, 0.1]],
                },
            }])
            .unwrap()
        };
        let set = |angle: f64| {
            let scene = scene_at(angle);
            let vs: Vec<View> = [-8.0f64, 0.0, 11.0]
                .iter()
                .map(|a| {
                    let pose = CameraPose::new(a.to_radians() + angle, 0.05, 1.0).unwrap();
                    View {
                        image: render_rgbd(&scene, &k, &pose, 32, 32, 1).unwrap(),
                        pose,
                    }
                })
                .collect();
            consistency_scores(&ViewSet::new("z", vs).unwrap(), &k, &cfg).unwrap()
        };
        let (a, b) = (set(0.0), set(step));
        assert!((a.v_depth - b.v_depth).abs() <= 1e-9 * a.v_depth.max(1e-12), "{a:?} {b:?}");
        assert!((a.v_color - b.v_color).abs() <= 1e-9 * a.v_color.max(1e-12), "{a:?} {b:?}");
    }

    #[test]
    fn frontal_face_render_falls_inside_face_range() {
        let k = CameraIntrinsics::from_image_size(64).unwrap();
        let pose = CameraPose::new(0.0, 0.0, 1.0).unwrap();
        let r = crate::oracle::render(&Scene::checker_sphere(), &k, &pose, 64, 64, 1).unwrap();
        let un = unproject(&r.image, &k, &pose.extrinsics());
        let fg: Vec<Vector3<f64>> = un.cloud.points.iter().zip(&un.pixels).filter(|(_, &p)| r.hit[p].is_some()).map(|(p, _)| *p).collect();
        let q = polar_quantize(&cloud(fg), &PolarCellConfig::face(DEFAULT_BINS));
        assert!(q.iter().all(Option::is_some));
    }
}
