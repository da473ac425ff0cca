//! Top-level experiment configuration shared by every CLI subcommand.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::camera::{CameraPose, PoseDistribution};
use crate::error::{Error, Result};
use crate::generator::{RecoverConfig, TrainConfig};
use crate::losses::LossWeights;
use crate::metrics::PolarCellConfig;
use crate::oracle::{Scene, DEFAULT_FAR_DEPTH};
use crate::voxel::{read_opacity_grid, OpacityGrid};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OcclusionDemoConfig {
    /// Opacity grid header written by `write_opacity_grid`; a built-in
    /// two-disc grid of `dims` is used when absent.
    pub grid: Option<PathBuf>,
    pub dims: [usize; 3],
    pub far_depth: f64,
}

impl Default for OcclusionDemoConfig {
    fn default() -> Self {
        Self {
            grid: None,
            dims: [8, 32, 32],
            far_depth: DEFAULT_FAR_DEPTH,
        }
    }
}

impl OcclusionDemoConfig {
    pub fn load_grid(&self) -> Result<OpacityGrid> {
        match &self.grid {
            Some(path) => read_opacity_grid(path),
            None => demo_grid(self.dims),
        }
    }
}

/// A disc of opacity 0.7 in front of a larger disc of opacity 0.6, so
/// overlapping rays cross the unit threshold at the second disc.
pub fn demo_grid(dims: [usize; 3]) -> Result<OpacityGrid> {
    let [d, h, w] = dims;
    if d < 2 {
        return Err(Error::invalid("occlusion demo", "needs at least 2 depth slices"));
    }
    let (front, back) = (d / 4, (3 * d) / 4);
    let mut values = vec![0.0; d * h * w];
    for y in 0..h {
        for x in 0..w {
            let u = (x as f64 + 0.5) / w as f64;
            let v = (y as f64 + 0.5) / h as f64;
            if (u - 0.38).hypot(v - 0.45) < 0.22 {
                values[(front * h + y) * w + x] = 0.7;
            }
            if (u - 0.6).hypot(v - 0.55) < 0.32 {
                for k in back..d.min(back + 2) {
                    values[(k * h + y) * w + x] = 0.6;
                }
            }
        }
    }
    let depths = (0..d).map(|k| 0.5 + k as f64 / (d - 1) as f64).collect();
    OpacityGrid::new(dims, values, depths)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub scene: Scene,
    pub image_size: usize,
    pub supersample: usize,
    pub poses: PoseDistribution,
    /// View pair used by `warp`, `recover-depth` and `occlusion-demo`.
    pub pose_a: CameraPose,
    pub pose_b: CameraPose,
    pub loss: LossWeights,
    pub metrics: PolarCellConfig,
    pub train: TrainConfig,
    pub recover: RecoverConfig,
    pub occlusion: OcclusionDemoConfig,
    pub out_dir: Option<PathBuf>,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            scene: Scene::checker_sphere(),
            image_size: 64,
            supersample: 1,
            poses: PoseDistribution::face(),
            pose_a: CameraPose::from_degrees(0.0, 0.0, 1.0).expect("valid pose"),
            pose_b: CameraPose::from_degrees(15.0, 0.0, 1.0).expect("valid pose"),
            loss: LossWeights::default(),
            metrics: PolarCellConfig::face(crate::metrics::DEFAULT_BINS),
            train: TrainConfig::default(),
            recover: RecoverConfig::default(),
            occlusion: OcclusionDemoConfig::default(),
            out_dir: None,
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        if self.image_size < 2 {
            return Err(Error::invalid("image_size", format!("must be at least 2, got {}", self.image_size)));
        }
        if self.supersample == 0 {
            return Err(Error::invalid("supersample", "must be at least 1"));
        }
        self.loss.validate()?;
        self.metrics.validate()?;
        self.train.validate()?;
        self.recover.weights.validate()?;
        if !(self.recover.lr > 0.0) || self.recover.divergence_window == 0 {
            return Err(Error::invalid("recover", "lr and divergence_window must be positive"));
        }
        let o = &self.occlusion;
        if o.grid.is_none() && (o.dims.contains(&0) || o.dims[0] < 2) {
            return Err(Error::invalid("occlusion.dims", format!("{:?} needs >= 2 slices and non-zero sizes", o.dims)));
        }
        if !(o.far_depth > 0.0) {
            return Err(Error::invalid("occlusion.far_depth", "must be positive"));
        }
        Ok(())
    }

    /// Parses and validates a JSON config; unknown keys are rejected.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::voxel::{accumulative_projection_weights, write_opacity_grid};

    #[test]
    fn empty_object_is_default() {
        let cfg = ExperimentConfig::from_json("{}").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        let back = ExperimentConfig::from_json(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_rejected_at_every_level() {
        for bad in [
            r#"{"sede": 1}"#,
            r#"{"loss": {"lambda3d": 1}}"#,
            r#"{"train": {"generator": {"latent": 3}}}"#,
            r#"{"metrics": {"origin": [0,0,0], "azimuth_min_deg": -1, "azimuth_max_deg": 1,
                "elevation_min_deg": -1, "elevation_max_deg": 1, "colour": true}}"#,
        ] {
            assert!(ExperimentConfig::from_json(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn invalid_values_rejected() {
        for bad in [
            r#"{"image_size": 1}"#,
            r#"{"loss": {"d_min": 0}}"#,
            r#"{"train": {"batch_size": 0}}"#,
            r#"{"poses": {"azimuth_range_deg": 30, "elevation_range_deg": 10, "max_delta_deg": 40}}"#,
            r#"{"scene": {"primitives": [{"shape": {"kind": "sphere", "center": [0,0,0], "radius": -1},
                "texture": {"kind": "solid", "color": [0.5,0.5,0.5]}}]}}"#,
        ] {
            assert!(ExperimentConfig::from_json(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn demo_grid_clamps_overlap() {
        let g = demo_grid([8, 32, 32]).unwrap();
        let w = accumulative_projection_weights(&g);
        let mut overlap = 0;
        for y in 0..32 {
            for x in 0..32 {
                let ray = w.ray(y, x);
                if ray[2] > 0.0 && ray[6] > 0.0 {
                    overlap += 1;
                    // 0.7 then 0.6: prefix 0.7 < 1 keeps the back disc's first
                    // slice, prefix 1.3 drops the second
                    assert_eq!((ray[6], ray[7]), (0.6, 0.0));
                }
            }
        }
        assert!(overlap > 0);
    }

    #[test]
    fn grid_path_is_read() {
        let dir = tempfile::tempdir().unwrap();
        let g = demo_grid([4, 5, 6]).unwrap();
        let path = dir.path().join("grid.json");
        write_opacity_grid(&g, &path).unwrap();
        let cfg = OcclusionDemoConfig {
            grid: Some(path),
            ..OcclusionDemoConfig::default()
        };
        let back = cfg.load_grid().unwrap();
        assert_eq!((back.dims(), back.slice_depths()), (g.dims(), g.slice_depths()));
        for (a, b) in back.values().iter().zip(g.values()) {
            assert_eq!(*a, *b as f32 as f64);
        }
    }
}
