//! 3D consistency loss, depth floor, the combined generator objective and
//! non-saturating adversarial terms.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::autodiff::{softplus, Tape, Tensor, Var};
use crate::camera::{relative_transform, CameraIntrinsics, CameraPose, RigidTransform};
use crate::error::{Error, Result};
use crate::geometry::{occlusion_mask, warp_field_var, OcclusionMask, RgbdImage};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_3d: f64,
    pub lambda_depth: f64,
    /// Depth floor of the hinge regulariser, world units.
    pub d_min: f64,
    /// Tolerance of the occlusion test, world units.
    pub occlusion_margin: f64,
    /// Weight γ of the R1 term `γ/2 · E‖∇D(x)‖²`.
    pub r1_weight: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_3d: 1.0,
            lambda_depth: 10.0,
            d_min: 0.3,
            occlusion_margin: 1e-3,
            r1_weight: 10.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let check = |name: &'static str, v: f64, ok: bool| {
            if ok && v.is_finite() {
                Ok(())
            } else {
                Err(Error::invalid(name, format!("got {v}")))
            }
        };
        check("lambda_3d", self.lambda_3d, self.lambda_3d >= 0.0)?;
        check("lambda_depth", self.lambda_depth, self.lambda_depth >= 0.0)?;
        check("d_min", self.d_min, self.d_min > 0.0)?;
        check("occlusion_margin", self.occlusion_margin, self.occlusion_margin >= 0.0)?;
        check("r1_weight", self.r1_weight, self.r1_weight >= 0.0)
    }
}

/// One direction of the 3D loss on the tape.
pub struct DirectionVars<'t> {
    pub photometric: Var<'t>,
    pub depth_consistency: Var<'t>,
    pub mask: OcclusionMask,
}

fn check_view(rgb: Var<'_>, depth: Var<'_>) -> Result<(usize, usize)> {
    let (r, d) = (rgb.shape(), depth.shape());
    if r.len() != 3 || r[2] != 3 || d.as_slice() != [r[0], r[1], 1] {
        return Err(Error::ShapeMismatch {
            op: "loss_3d view",
            lhs: r.to_vec(),
            rhs: d.to_vec(),
        });
    }
    Ok((r[0], r[1]))
}

fn mask_tensor(mask: &OcclusionMask, channels: usize) -> Tensor {
    let data = mask
        .keep
        .iter()
        .flat_map(|&k| std::iter::repeat_n(if k { 1.0 } else { 0.0 }, channels))
        .collect();
    Tensor::new(&[mask.height, mask.width, channels], data).expect("mask shape")
}

/// View 1 against view 2 warped into it: mean L1 colour difference and mean
/// L1 depth difference over pixels kept by the occlusion mask. Masked pixels
/// enter through a constant zero factor and so receive exactly zero gradient.
/// An empty mask yields constant zeros.
#[allow(clippy::too_many_arguments)]
pub fn loss_3d_direction<'t>(
    rgb1: Var<'t>,
    depth1: Var<'t>,
    rgb2: Var<'t>,
    depth2: Var<'t>,
    k: &CameraIntrinsics,
    t12: &RigidTransform,
    margin: f64,
) -> Result<DirectionVars<'t>> {
    let s1 = check_view(rgb1, depth1)?;
    let s2 = check_view(rgb2, depth2)?;
    if s1 != s2 {
        return Err(Error::ShapeMismatch {
            op: "loss_3d",
            lhs: vec![s1.0, s1.1],
            rhs: vec![s2.0, s2.1],
        });
    }
    let tape = rgb1.tape();
    let wv = warp_field_var(depth1, k, t12)?;
    let warped_rgb = rgb2.bilinear_sample(wv.coords)?;
    let warped_depth = depth2.bilinear_sample(wv.coords)?;
    let mask = warped_depth.with_value(|wd| occlusion_mask(&wv.field, wd.data(), margin))?;
    let n = mask.count();
    if n == 0 {
        return Ok(DirectionVars {
            photometric: tape.scalar(0.0),
            depth_consistency: tape.scalar(0.0),
            mask,
        });
    }
    let m3 = tape.constant(mask_tensor(&mask, 3));
    let m1 = tape.constant(mask_tensor(&mask, 1));
    let photometric = rgb1.sub(warped_rgb)?.abs().mul(m3)?.sum().scale(1.0 / (3 * n) as f64);
    let depth_consistency = wv.projected_depth.sub(warped_depth)?.abs().mul(m1)?.sum().scale(1.0 / n as f64);
    Ok(DirectionVars {
        photometric,
        depth_consistency,
        mask,
    })
}

/// Symmetrised 3D loss on the tape.
pub struct Loss3dVars<'t> {
    pub photometric: Var<'t>,
    pub depth_consistency: Var<'t>,
    /// Masks for the 1→2 and 2→1 directions.
    pub masks: [OcclusionMask; 2],
}

impl Loss3dVars<'_> {
    /// Fraction of pixels kept by the masks, over both directions.
    pub fn masked_fraction(&self) -> f64 {
        let total: usize = self.masks.iter().map(|m| m.keep.len()).sum();
        let kept: usize = self.masks.iter().map(|m| m.count()).sum();
        kept as f64 / total as f64
    }

    /// True when either direction had no pixel to compare.
    pub fn empty_mask(&self) -> bool {
        self.masks.iter().any(|m| m.count() == 0)
    }
}

/// Averages both warp directions. `e1`, `e2` are world→camera extrinsics.
#[allow(clippy::too_many_arguments)]
pub fn loss_3d_var<'t>(
    rgb1: Var<'t>,
    depth1: Var<'t>,
    rgb2: Var<'t>,
    depth2: Var<'t>,
    k: &CameraIntrinsics,
    e1: &RigidTransform,
    e2: &RigidTransform,
    margin: f64,
) -> Result<Loss3dVars<'t>> {
    let a = loss_3d_direction(rgb1, depth1, rgb2, depth2, k, &relative_transform(e1, e2), margin)?;
    let b = loss_3d_direction(rgb2, depth2, rgb1, depth1, k, &relative_transform(e2, e1), margin)?;
    Ok(Loss3dVars {
        photometric: a.photometric.add(b.photometric)?.scale(0.5),
        depth_consistency: a.depth_consistency.add(b.depth_consistency)?.scale(0.5),
        masks: [a.mask, b.mask],
    })
}

/// Values and gradients of the 3D loss between two RGBD images.
#[derive(Debug, Clone)]
pub struct Loss3d {
    pub photometric: f64,
    pub depth_consistency: f64,
    pub masked_fraction: f64,
    pub empty_mask: bool,
    /// Gradients of `photometric + depth_consistency` w.r.t. the RGB
    /// (`H*W*3`) and depth (`H*W`) of image 1 and image 2.
    pub grad_rgb: [Vec<f64>; 2],
    pub grad_depth: [Vec<f64>; 2],
}

pub fn image_vars<'t>(tape: &'t Tape, img: &RgbdImage) -> (Var<'t>, Var<'t>) {
    let (h, w) = (img.height(), img.width());
    let rgb = tape.input(Tensor::new(&[h, w, 3], img.rgb().to_vec()).expect("image shape"));
    let depth = tape.input(Tensor::new(&[h, w, 1], img.depth().to_vec()).expect("image shape"));
    (rgb, depth)
}

pub fn loss_3d(
    img1: &RgbdImage,
    img2: &RgbdImage,
    k: &CameraIntrinsics,
    pose1: &CameraPose,
    pose2: &CameraPose,
    weights: &LossWeights,
) -> Result<Loss3d> {
    let tape = Tape::new();
    let (r1, d1) = image_vars(&tape, img1);
    let (r2, d2) = image_vars(&tape, img2);
    let l = loss_3d_var(r1, d1, r2, d2, k, &pose1.extrinsics(), &pose2.extrinsics(), weights.occlusion_margin)?;
    if l.empty_mask() {
        log::warn!("loss_3d: empty occlusion mask in at least one direction");
    }
    let total = l.photometric.add(l.depth_consistency)?;
    let g = tape.backward(total)?;
    Ok(Loss3d {
        photometric: l.photometric.item(),
        depth_consistency: l.depth_consistency.item(),
        masked_fraction: l.masked_fraction(),
        empty_mask: l.empty_mask(),
        grad_rgb: [g.wrt(r1).into_data(), g.wrt(r2).into_data()],
        grad_depth: [g.wrt(d1).into_data(), g.wrt(d2).into_data()],
    })
}

/// `(1/HW) Σ max(0, d_min - D)²` on the tape.
pub fn depth_floor_var(depth: Var<'_>, d_min: f64) -> Var<'_> {
    depth.neg().offset(d_min).relu().square().mean()
}

/// Depth-floor value and its gradient `-2 max(0, d_min - D) / HW`.
pub fn loss_depth_floor(depth: &[f64], d_min: f64) -> Result<(f64, Vec<f64>)> {
    if !(d_min > 0.0) {
        return Err(Error::invalid("d_min", format!("must be positive, got {d_min}")));
    }
    if depth.is_empty() {
        return Err(Error::invalid("depth", "empty depth map"));
    }
    let n = depth.len() as f64;
    let gaps: Vec<f64> = depth.iter().map(|&d| (d_min - d).max(0.0)).collect();
    let value = crate::autodiff::pairwise_sum(&gaps.iter().map(|g| g * g).collect::<Vec<_>>()) / n;
    Ok((value, gaps.iter().map(|g| -2.0 * g / n).collect()))
}

/// Photometric and depth-consistency values of one evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Loss3dTerms {
    pub photometric: f64,
    pub depth_consistency: f64,
    pub masked_fraction: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub photometric: f64,
    pub depth_consistency: f64,
    pub depth_floor: f64,
    pub adversarial: f64,
    pub total: f64,
    pub masked_fraction: f64,
}

pub const CSV_HEADER: &str = "iteration,photometric,depth_consistency,depth_floor,adversarial,total,masked_fraction";

impl LossReport {
    pub fn csv_row(&self, iteration: usize) -> String {
        let mut s = String::new();
        write!(
            s,
            "{iteration},{},{},{},{},{},{}",
            self.photometric, self.depth_consistency, self.depth_floor, self.adversarial, self.total, self.masked_fraction
        )
        .expect("writing to a String");
        s
    }
}

/// `L_G = adv + λ_3D (photometric + depth_consistency) + λ_depth floor`.
pub fn generator_objective(adv: f64, l3d: Loss3dTerms, floor: f64, weights: &LossWeights) -> Result<LossReport> {
    weights.validate()?;
    for (term, v) in [
        ("adversarial", adv),
        ("photometric", l3d.photometric),
        ("depth_consistency", l3d.depth_consistency),
        ("depth_floor", floor),
    ] {
        if v.is_nan() {
            return Err(Error::NonFinite { term: term.into() });
        }
    }
    let total = adv + weights.lambda_3d * (l3d.photometric + l3d.depth_consistency) + weights.lambda_depth * floor;
    Ok(LossReport {
        photometric: l3d.photometric,
        depth_consistency: l3d.depth_consistency,
        depth_floor: floor,
        adversarial: adv,
        total,
        masked_fraction: l3d.masked_fraction,
    })
}

/// Tape form of [`generator_objective`], same association order.
pub fn generator_objective_var<'t>(
    adv: Var<'t>,
    photometric: Var<'t>,
    depth_consistency: Var<'t>,
    floor: Var<'t>,
    weights: &LossWeights,
) -> Result<Var<'t>> {
    let l3d = photometric.add(depth_consistency)?.scale(weights.lambda_3d);
    adv.add(l3d)?.add(floor.scale(weights.lambda_depth))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdversarialLosses {
    pub g_loss: f64,
    pub d_loss: f64,
    /// Mean squared norm of the real-logit gradient w.r.t. the real inputs.
    pub penalty: f64,
}

fn mean(v: &[f64]) -> f64 {
    crate::autodiff::pairwise_sum(v) / v.len() as f64
}

/// Non-saturating losses: `g = E softplus(-f)`, `d = E softplus(-r) + E
/// softplus(f)`. `real_input_grads[i]` is `∂D(x_i)/∂x_i` for each real input.
pub fn adversarial_losses(real_logits: &[f64], fake_logits: &[f64], real_input_grads: &[Vec<f64>]) -> Result<AdversarialLosses> {
    if real_logits.is_empty() || fake_logits.is_empty() {
        return Err(Error::invalid("logits", "empty batch"));
    }
    if real_logits.iter().chain(fake_logits).any(|l| !l.is_finite()) {
        return Err(Error::NonFinite { term: "logits".into() });
    }
    let g: Vec<f64> = fake_logits.iter().map(|&f| softplus(-f)).collect();
    let dr: Vec<f64> = real_logits.iter().map(|&r| softplus(-r)).collect();
    let df: Vec<f64> = fake_logits.iter().map(|&f| softplus(f)).collect();
    Ok(AdversarialLosses {
        g_loss: mean(&g),
        d_loss: mean(&dr) + mean(&df),
        penalty: r1_penalty(real_input_grads),
    })
}

/// `E ‖g_i‖²`; zero for an empty batch.
pub fn r1_penalty(input_grads: &[Vec<f64>]) -> f64 {
    if input_grads.is_empty() {
        return 0.0;
    }
    let norms: Vec<f64> = input_grads.iter().map(|g| crate::autodiff::pairwise_sum(&g.iter().map(|v| v * v).collect::<Vec<_>>())).collect();
    mean(&norms)
}

/// `mean(softplus(-fake))` on the tape.
pub fn generator_adv_var(fake_logits: Var<'_>) -> Var<'_> {
    fake_logits.neg().softplus().mean()
}

/// `mean(softplus(-real)) + mean(softplus(fake))` on the tape.
pub fn discriminator_adv_var<'t>(real_logits: Var<'t>, fake_logits: Var<'t>) -> Result<Var<'t>> {
    real_logits.neg().softplus().mean().add(fake_logits.softplus().mean())
}
