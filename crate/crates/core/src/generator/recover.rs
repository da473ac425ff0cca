use serde::{Deserialize, Serialize};

use crate::autodiff::{adam_step, AdamConfig, AdamState, Tape, Tensor};
use crate::camera::{CameraIntrinsics, CameraPose};
use crate::error::{Error, Result};
use crate::geometry::RgbdImage;
use crate::losses::{depth_floor_var, generator_objective_var, loss_3d_var, LossWeights};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RecoverConfig {
    pub iterations: usize,
    pub lr: f64,
    pub weights: LossWeights,
    /// Consecutive loss increases that count as divergence.
    pub divergence_window: usize,
}

impl Default for RecoverConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            lr: 0.01,
            weights: LossWeights::default(),
            divergence_window: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecoverResult {
    pub depth: Vec<f64>,
    /// Objective before each update.
    pub losses: Vec<f64>,
}

/// Optimises a free per-pixel depth map for view 1 against a fixed second
/// RGBD view. The objective is `λ_3D (photometric + depth_consistency) +
/// λ_depth floor(depth1)`; the RGB of `view1` is held fixed and its depth
/// channel is ignored.
pub fn recover_depth(
    view1: &RgbdImage,
    init_depth: &[f64],
    view2: &RgbdImage,
    k: &CameraIntrinsics,
    pose1: &CameraPose,
    pose2: &CameraPose,
    cfg: &RecoverConfig,
) -> Result<RecoverResult> {
    cfg.weights.validate()?;
    if !(cfg.lr > 0.0) || cfg.divergence_window == 0 {
        return Err(Error::invalid("recover config", "lr and divergence_window must be positive"));
    }
    let (w, h) = (view1.width(), view1.height());
    if init_depth.len() != w * h || view2.width() != w || view2.height() != h {
        return Err(Error::ShapeMismatch {
            op: "recover_depth",
            lhs: vec![h, w],
            rhs: vec![view2.height(), view2.width(), init_depth.len()],
        });
    }
    let rgb1 = Tensor::new(&[h, w, 3], view1.rgb().to_vec())?;
    let rgb2 = Tensor::new(&[h, w, 3], view2.rgb().to_vec())?;
    let depth2 = Tensor::new(&[h, w, 1], view2.depth().to_vec())?;
    let (e1, e2) = (pose1.extrinsics(), pose2.extrinsics());
    let mut params = vec![Tensor::new(&[h, w, 1], init_depth.to_vec())?];
    let mut state = AdamState::new(&params);
    let adam = AdamConfig::with_lr(cfg.lr);
    let mut losses = Vec::with_capacity(cfg.iterations);
    let mut rising = 0;
    for it in 0..cfg.iterations {
        let tape = Tape::new();
        let d1 = tape.input(params[0].clone());
        let l = loss_3d_var(
            tape.constant(rgb1.clone()),
            d1,
            tape.constant(rgb2.clone()),
            tape.constant(depth2.clone()),
            k,
            &e1,
            &e2,
            cfg.weights.occlusion_margin,
        )?;
        let floor = depth_floor_var(d1, cfg.weights.d_min);
        let total = generator_objective_var(tape.scalar(0.0), l.photometric, l.depth_consistency, floor, &cfg.weights)?;
        let value = total.item();
        if !value.is_finite() {
            return Err(Error::NonFinite {
                term: format!("recover_depth objective at step {it}"),
            });
        }
        rising = match losses.last() {
            Some(&prev) if value > prev => rising + 1,
            _ => 0,
        };
        losses.push(value);
        if rising >= cfg.divergence_window {
            return Err(Error::Diverged(format!(
                "objective rose for {rising} consecutive steps, reaching {value} at step {it}"
            )));
        }
        let g = tape.backward(total)?;
        adam_step(&mut params, &[g.wrt(d1)], &mut state, &adam)?;
    }
    Ok(RecoverResult {
        depth: params.pop().expect("one parameter").into_data(),
        losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{render, Scene};

    #[test]
    fn stays_at_ground_truth() {
        let size = 32;
        let k = CameraIntrinsics::from_image_size(size).unwrap();
        let p1 = CameraPose::from_degrees(0.0, 0.0, 1.0).unwrap();
        let p2 = CameraPose::from_degrees(15.0, 0.0, 1.0).unwrap();
        let scene = Scene::checker_sphere();
        let r1 = render(&scene, &k, &p1, size, size, 4).unwrap();
        let r2 = render(&scene, &k, &p2, size, size, 4).unwrap();
        let cfg = RecoverConfig {
            iterations: 200,
            ..RecoverConfig::default()
        };
        let out = recover_depth(&r1.image, r1.image.depth(), &r2.image, &k, &p1, &p2, &cfg).unwrap();
        let floor = out.losses[0];
        assert!(out.losses.iter().all(|&l| l <= 2.0 * floor), "floor {floor}");
        let (lo, hi) = r1.image.depth_range();
        let fg = r1.foreground();
        let mut errs: Vec<f64> = out
            .depth
            .iter()
            .zip(r1.image.depth())
            .zip(&fg)
            .filter(|(_, &f)| f)
            .map(|((a, b), _)| (a - b).abs())
            .collect();
        errs.sort_by(f64::total_cmp);
        assert!(errs[errs.len() / 2] < 0.005 * (hi - lo), "median drift {}", errs[errs.len() / 2]);
    }

    #[test]
    fn reports_divergence() {
        let k = CameraIntrinsics::from_image_size(16).unwrap();
        let p1 = CameraPose::from_degrees(0.0, 0.0, 1.0).unwrap();
        let p2 = CameraPose::from_degrees(10.0, 0.0, 1.0).unwrap();
        let scene = Scene::checker_sphere();
        let r1 = render(&scene, &k, &p1, 16, 16, 1).unwrap();
        let r2 = render(&scene, &k, &p2, 16, 16, 1).unwrap();
        // an oversized step makes Adam oscillate with growing loss
        let cfg = RecoverConfig {
            iterations: 400,
            lr: 50.0,
            divergence_window: 2,
            ..RecoverConfig::default()
        };
        let res = recover_depth(&r1.image, &vec![1.0; 256], &r2.image, &k, &p1, &p2, &cfg);
        assert!(matches!(res, Err(Error::Diverged(_))), "{res:?}");
        assert!(recover_depth(&r1.image, &[1.0; 3], &r2.image, &k, &p1, &p2, &RecoverConfig::default()).is_err());
    }
}
