use crate::autodiff::{bilinear_tap, Tensor, Var};
use crate::camera::{CameraIntrinsics, RigidTransform};
use crate::error::{Error, Result};

use super::RgbdImage;

/// Per-pixel correspondence from view 1 into view 2.
#[derive(Debug, Clone, PartialEq)]
pub struct WarpField {
    pub width: usize,
    pub height: usize,
    /// Continuous `(x, y)` in the view-2 image for each view-1 pixel.
    pub coords: Vec<[f64; 2]>,
    /// Depth of each view-1 surface point in the view-2 camera frame.
    pub projected_depth: Vec<f64>,
    /// False where the projected depth is non-positive or the coordinate
    /// leaves `[0, W-1] x [0, H-1]`.
    pub valid: Vec<bool>,
}

/// Per-pixel constants of the warp written as a displacement from the pixel
/// lattice. With `M = K (R - I) K⁻¹`, `m = M p` and `o = K t`:
///
/// `z₂ = D (1 + m_z) + o_z`, `x₂ = x + (D a_x + b_x) / z₂` where
/// `a_x = m_x - x m_z` and `b_x = o_x - x o_z` (same for y).
///
/// An identity transform gives `a = b = 0` exactly, so the lattice and the
/// depths pass through unchanged.
#[derive(Debug, Clone, PartialEq)]
pub struct WarpBasis {
    pub width: usize,
    pub height: usize,
    pub ax: Vec<f64>,
    pub ay: Vec<f64>,
    pub cz: Vec<f64>,
    pub bx: Vec<f64>,
    pub by: Vec<f64>,
    pub oz: f64,
}

pub fn warp_basis(k: &CameraIntrinsics, t12: &RigidTransform, width: usize, height: usize) -> WarpBasis {
    let m = k.matrix() * (t12.rotation - nalgebra::Matrix3::identity()) * k.inverse_matrix();
    let o = k.matrix() * t12.translation;
    let n = width * height;
    let mut wb = WarpBasis {
        width,
        height,
        ax: Vec::with_capacity(n),
        ay: Vec::with_capacity(n),
        cz: Vec::with_capacity(n),
        bx: Vec::with_capacity(n),
        by: Vec::with_capacity(n),
        oz: o.z,
    };
    for y in 0..height {
        for x in 0..width {
            let (xf, yf) = (x as f64, y as f64);
            let v = m * nalgebra::Vector3::new(xf, yf, 1.0);
            wb.ax.push(v.x - xf * v.z);
            wb.ay.push(v.y - yf * v.z);
            wb.cz.push(1.0 + v.z);
            wb.bx.push(o.x - xf * o.z);
            wb.by.push(o.y - yf * o.z);
        }
    }
    wb
}

#[inline]
pub(crate) fn in_bounds(u: f64, v: f64, width: usize, height: usize) -> bool {
    const EPS: f64 = 1e-9;
    (-EPS..=(width - 1) as f64 + EPS).contains(&u) && (-EPS..=(height - 1) as f64 + EPS).contains(&v)
}

/// Maps each pixel of view 1 into view 2 with
/// `D₂ p₂ = K R₁₂ K⁻¹ D₁ p₁ + K t₁₂`.
pub fn compute_warp_field(
    depth: &[f64],
    width: usize,
    height: usize,
    k: &CameraIntrinsics,
    t12: &RigidTransform,
) -> Result<WarpField> {
    if width < 2 || height < 2 || depth.len() != width * height {
        return Err(Error::ShapeMismatch {
            op: "compute_warp_field",
            lhs: vec![height, width],
            rhs: vec![depth.len()],
        });
    }
    let wb = warp_basis(k, t12, width, height);
    let n = width * height;
    let mut wf = WarpField {
        width,
        height,
        coords: Vec::with_capacity(n),
        projected_depth: Vec::with_capacity(n),
        valid: Vec::with_capacity(n),
    };
    for (i, &d) in depth.iter().enumerate() {
        let z = d * wb.cz[i] + wb.oz;
        let u = (d * wb.ax[i] + wb.bx[i]) / z + (i % width) as f64;
        let v = (d * wb.ay[i] + wb.by[i]) / z + (i / width) as f64;
        wf.coords.push([u, v]);
        wf.projected_depth.push(z);
        wf.valid.push(d > 0.0 && z > 0.0 && in_bounds(u, v, width, height));
    }
    Ok(wf)
}

/// Differentiable warp of a `[H, W, 1]` depth map.
pub struct WarpVars<'t> {
    /// `[H, W, 2]` view-2 coordinates `(x, y)`.
    pub coords: Var<'t>,
    /// `[H, W, 1]` depth in the view-2 frame.
    pub projected_depth: Var<'t>,
    /// Forward values, including validity.
    pub field: WarpField,
}

/// Tape version of [`compute_warp_field`]; values agree bitwise. Invalid
/// pixels divide by 1 instead of `z₂` so that their (unused) coordinates
/// stay finite.
pub fn warp_field_var<'t>(depth: Var<'t>, k: &CameraIntrinsics, t12: &RigidTransform) -> Result<WarpVars<'t>> {
    let s = depth.shape();
    if s.len() != 3 || s[2] != 1 {
        return Err(Error::ShapeMismatch {
            op: "warp_field_var",
            lhs: s.to_vec(),
            rhs: vec![0, 0, 1],
        });
    }
    let (h, w) = (s[0], s[1]);
    let field = depth.with_value(|d| compute_warp_field(d.data(), w, h, k, t12))?;
    let wb = warp_basis(k, t12, w, h);
    let tape = depth.tape();
    let shape = [h, w, 1];
    let constant = |v: Vec<f64>| tape.constant(Tensor::new(&shape, v).expect("per-pixel constant"));
    let keep: Vec<f64> = field.valid.iter().map(|&ok| if ok { 1.0 } else { 0.0 }).collect();
    let fill: Vec<f64> = keep.iter().map(|k| 1.0 - k).collect();

    let z = depth.mul(constant(wb.cz))?.offset(wb.oz);
    let z_safe = z.mul(constant(keep))?.add(constant(fill))?;
    let lattice_x = (0..h * w).map(|i| (i % w) as f64).collect();
    let lattice_y = (0..h * w).map(|i| (i / w) as f64).collect();
    let u = depth.mul(constant(wb.ax))?.add(constant(wb.bx))?.div(z_safe)?.add(constant(lattice_x))?;
    let v = depth.mul(constant(wb.ay))?.add(constant(wb.by))?.div(z_safe)?.add(constant(lattice_y))?;
    Ok(WarpVars {
        coords: tape.concat(&[u, v], 2)?,
        projected_depth: z,
        field,
    })
}

/// Bilinear lookup of a row-major `height x width x channels` grid at
/// continuous coordinates; out-of-range coordinates clamp to the border.
pub fn bilinear_sample(grid: &[f64], width: usize, height: usize, channels: usize, coords: &[[f64; 2]]) -> Vec<f64> {
    assert!(width >= 2 && height >= 2, "bilinear grid must be at least 2x2");
    assert_eq!(grid.len(), width * height * channels);
    let c = channels;
    let mut out = Vec::with_capacity(coords.len() * c);
    for &[x, y] in coords {
        let tap = bilinear_tap(x, y, width, height);
        let (w00, w01, w10, w11) = (
            (1.0 - tap.ax) * (1.0 - tap.ay),
            tap.ax * (1.0 - tap.ay),
            (1.0 - tap.ax) * tap.ay,
            tap.ax * tap.ay,
        );
        let i00 = (tap.y0 * width + tap.x0) * c;
        let i10 = i00 + width * c;
        for ch in 0..c {
            out.push(w00 * grid[i00 + ch] + w01 * grid[i00 + c + ch] + w10 * grid[i10 + ch] + w11 * grid[i10 + c + ch]);
        }
    }
    out
}

/// Source view resampled onto the target lattice.
#[derive(Debug, Clone, PartialEq)]
pub struct WarpedView {
    pub rgb: Vec<f64>,
    pub depth: Vec<f64>,
    pub valid: Vec<bool>,
}

/// Samples `src` (the view-2 image) at the warp-field coordinates.
pub fn warp_image(src: &RgbdImage, wf: &WarpField) -> Result<WarpedView> {
    if src.width() != wf.width || src.height() != wf.height {
        return Err(Error::ShapeMismatch {
            op: "warp_image",
            lhs: vec![src.height(), src.width()],
            rhs: vec![wf.height, wf.width],
        });
    }
    Ok(WarpedView {
        rgb: bilinear_sample(src.rgb(), src.width(), src.height(), 3, &wf.coords),
        depth: bilinear_sample(src.depth(), src.width(), src.height(), 1, &wf.coords),
        valid: wf.valid.clone(),
    })
}

/// Pixels kept by the occlusion test.
#[derive(Debug, Clone, PartialEq)]
pub struct OcclusionMask {
    pub width: usize,
    pub height: usize,
    pub keep: Vec<bool>,
}

impl OcclusionMask {
    pub fn count(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }
}

/// Keeps a pixel iff it is valid and its projected depth does not exceed
/// the warped depth of the other view by more than `margin`.
pub fn occlusion_mask(wf: &WarpField, warped_depth: &[f64], margin: f64) -> Result<OcclusionMask> {
    if !(margin >= 0.0) {
        return Err(Error::invalid("occlusion margin", format!("must be non-negative, got {margin}")));
    }
    if warped_depth.len() != wf.projected_depth.len() {
        return Err(Error::ShapeMismatch {
            op: "occlusion_mask",
            lhs: vec![wf.projected_depth.len()],
            rhs: vec![warped_depth.len()],
        });
    }
    let keep = wf
        .valid
        .iter()
        .zip(&wf.projected_depth)
        .zip(warped_depth)
        .map(|((&ok, &pd), &wd)| ok && pd <= wd + margin)
        .collect();
    Ok(OcclusionMask {
        width: wf.width,
        height: wf.height,
        keep,
    })
}
