//! Ray weights over depth-major opacity grids: softmax along depth and the
//! accumulate-and-clamp visibility rule, plus projection and expected depth.
//!
//! Rays are the grid's depth columns; index `(d * H + y) * W + x`.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{CustomOp, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct OpacityGrid {
    depth: usize,
    height: usize,
    width: usize,
    values: Vec<f64>,
    slice_depths: Vec<f64>,
}

impl OpacityGrid {
    pub fn new(dims: [usize; 3], values: Vec<f64>, slice_depths: Vec<f64>) -> Result<Self> {
        let [d, h, w] = dims;
        if d == 0 || h == 0 || w == 0 {
            return Err(Error::invalid("opacity grid", format!("empty dims {dims:?}")));
        }
        if values.len() != d * h * w || slice_depths.len() != d {
            return Err(Error::ShapeMismatch {
                op: "opacity grid",
                lhs: vec![d, h, w],
                rhs: vec![values.len(), slice_depths.len()],
            });
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid("opacity grid", format!("opacity {v} outside [0, 1]")));
        }
        if slice_depths.windows(2).any(|p| !(p[0] < p[1])) || slice_depths.iter().any(|s| !s.is_finite()) {
            return Err(Error::invalid("opacity grid", "slice depths must be finite and strictly increasing"));
        }
        Ok(Self {
            depth: d,
            height: h,
            width: w,
            values,
            slice_depths,
        })
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.depth, self.height, self.width]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn slice_depths(&self) -> &[f64] {
        &self.slice_depths
    }
}

/// Non-negative weight per voxel, same layout as the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct RayWeights {
    pub dims: [usize; 3],
    pub values: Vec<f64>,
}

impl RayWeights {
    /// Weights along the ray through `(y, x)`, front to back.
    pub fn ray(&self, y: usize, x: usize) -> Vec<f64> {
        let [d, h, w] = self.dims;
        (0..d).map(|k| self.values[(k * h + y) * w + x]).collect()
    }
}

fn check_len(dims: [usize; 3], len: usize, op: &'static str) -> Result<()> {
    let [d, h, w] = dims;
    if d == 0 || d * h * w != len {
        return Err(Error::ShapeMismatch {
            op,
            lhs: dims.to_vec(),
            rhs: vec![len],
        });
    }
    Ok(())
}

/// Applies `f` to every ray: gathers the column, calls `f(column, out)`,
/// scatters `out` back.
fn per_ray(dims: [usize; 3], input: &[f64], mut f: impl FnMut(&[f64], &mut [f64])) -> Vec<f64> {
    let [d, h, w] = dims;
    let plane = h * w;
    let mut out = vec![0.0; input.len()];
    let mut col = vec![0.0; d];
    let mut res = vec![0.0; d];
    for p in 0..plane {
        for k in 0..d {
            col[k] = input[k * plane + p];
        }
        f(&col, &mut res);
        for k in 0..d {
            out[k * plane + p] = res[k];
        }
    }
    out
}

fn softmax_ray(scores: &[f64], out: &mut [f64]) {
    let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, &s) in out.iter_mut().zip(scores) {
        *o = (s - m).exp();
        z += *o;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
}

/// Softmax over the depth axis of each ray.
pub fn softmax_projection_weights(dims: [usize; 3], scores: &[f64]) -> Result<RayWeights> {
    check_len(dims, scores.len(), "softmax_projection_weights")?;
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite { term: "softmax scores".into() });
    }
    Ok(RayWeights {
        dims,
        values: per_ray(dims, scores, softmax_ray),
    })
}

/// Front-to-back clamp: voxel `i` keeps its opacity iff the running sum of
/// opacities strictly before it is below 1; later voxels get 0.
fn accumulate_ray(opacity: &[f64], out: &mut [f64]) {
    let mut prefix = 0.0;
    for (o, &a) in out.iter_mut().zip(opacity) {
        *o = if prefix < 1.0 { a } else { 0.0 };
        prefix += a;
    }
}

fn kept_ray(opacity: &[f64], out: &mut [f64]) {
    let mut prefix = 0.0;
    for (o, &a) in out.iter_mut().zip(opacity) {
        *o = if prefix < 1.0 { 1.0 } else { 0.0 };
        prefix += a;
    }
}

pub fn accumulative_projection_weights(grid: &OpacityGrid) -> RayWeights {
    RayWeights {
        dims: grid.dims(),
        values: per_ray(grid.dims(), &grid.values, accumulate_ray),
    }
}

/// Per-voxel keep flags of the accumulative rule.
pub fn accumulative_keep(grid: &OpacityGrid) -> Vec<bool> {
    per_ray(grid.dims(), &grid.values, kept_ray).into_iter().map(|k| k == 1.0).collect()
}

/// Weighted sum over depth: `features` is `D x H x W x C`, result `H x W x C`.
pub fn project_grid(features: &[f64], channels: usize, weights: &RayWeights) -> Result<Vec<f64>> {
    let [d, h, w] = weights.dims;
    if features.len() != d * h * w * channels {
        return Err(Error::ShapeMismatch {
            op: "project_grid",
            lhs: vec![d, h, w, channels],
            rhs: vec![features.len()],
        });
    }
    let plane = h * w;
    let mut out = vec![0.0; plane * channels];
    for k in 0..d {
        for p in 0..plane {
            let wt = weights.values[k * plane + p];
            for c in 0..channels {
                out[p * channels + c] += wt * features[(k * plane + p) * channels + c];
            }
        }
    }
    Ok(out)
}

/// Expected depth per ray; rays with zero total weight are background.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub depth: Vec<f64>,
    pub background: Vec<bool>,
}

pub fn expected_depth(weights: &RayWeights, slice_depths: &[f64], far_depth: f64) -> Result<DepthMap> {
    let [d, h, w] = weights.dims;
    if slice_depths.len() != d {
        return Err(Error::ShapeMismatch {
            op: "expected_depth",
            lhs: vec![d],
            rhs: vec![slice_depths.len()],
        });
    }
    let plane = h * w;
    let mut out = DepthMap {
        depth: Vec::with_capacity(plane),
        background: Vec::with_capacity(plane),
    };
    for p in 0..plane {
        let (mut sw, mut swd) = (0.0, 0.0);
        for (k, sd) in slice_depths.iter().enumerate() {
            let wt = weights.values[k * plane + p];
            sw += wt;
            swd += wt * sd;
        }
        if sw > 0.0 {
            // clamp guards the last-ulp excursion of the ratio
            out.depth.push((swd / sw).clamp(slice_depths[0], slice_depths[d - 1]));
            out.background.push(false);
        } else {
            out.depth.push(far_depth);
            out.background.push(true);
        }
    }
    Ok(out)
}

/// Softmax along axis 0 of a `[D, H, W]` tensor.
struct SoftmaxDepth;

impl CustomOp for SoftmaxDepth {
    fn name(&self) -> &str {
        "softmax_depth"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let t = inputs[0];
        let dims = dims3(t)?;
        Tensor::new(t.shape(), per_ray(dims, t.data(), softmax_ray))
    }

    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        let [d, h, w] = dims3(inputs[0]).expect("checked in forward");
        let plane = h * w;
        let (y, g) = (output.data(), grad.data());
        let mut out = vec![0.0; y.len()];
        for p in 0..plane {
            let dot: f64 = (0..d).map(|k| y[k * plane + p] * g[k * plane + p]).sum();
            for k in 0..d {
                let i = k * plane + p;
                out[i] = y[i] * (g[i] - dot);
            }
        }
        vec![Tensor::new(inputs[0].shape(), out).expect("same shape")]
    }
}

/// Accumulative clamp with straight-through gradient on kept voxels and
/// zero gradient on dropped ones.
struct AccumulativeClamp;

impl CustomOp for AccumulativeClamp {
    fn name(&self) -> &str {
        "accumulative_clamp"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let t = inputs[0];
        let dims = dims3(t)?;
        Tensor::new(t.shape(), per_ray(dims, t.data(), accumulate_ray))
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        let dims = dims3(inputs[0]).expect("checked in forward");
        let keep = per_ray(dims, inputs[0].data(), kept_ray);
        let g = keep.iter().zip(grad.data()).map(|(k, g)| k * g).collect();
        vec![Tensor::new(inputs[0].shape(), g).expect("same shape")]
    }
}

fn dims3(t: &Tensor) -> Result<[usize; 3]> {
    match t.shape() {
        &[d, h, w] if d > 0 => Ok([d, h, w]),
        s => Err(Error::ShapeMismatch {
            op: "ray weights",
            lhs: s.to_vec(),
            rhs: vec![0, 0, 0],
        }),
    }
}

/// Tape softmax weights for `[D, H, W]` scores.
pub fn softmax_weights_var(scores: Var<'_>) -> Result<Var<'_>> {
    scores.tape().custom(Arc::new(SoftmaxDepth), &[scores])
}

/// Tape accumulative weights for `[D, H, W]` opacities.
pub fn accumulative_weights_var(opacity: Var<'_>) -> Result<Var<'_>> {
    opacity.tape().custom(Arc::new(AccumulativeClamp), &[opacity])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GridHeader {
    dims: [usize; 3],
    slice_depths: Vec<f64>,
    /// Raw little-endian f32 payload, relative to the header.
    data: String,
}

/// Writes `header_path` (JSON) and a sibling `.f32` payload.
pub fn write_opacity_grid(grid: &OpacityGrid, header_path: &Path) -> Result<()> {
    let data_path = header_path.with_extension("f32");
    let name = data_path
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::invalid("grid path", header_path.display().to_string()))?
        .to_string();
    let bytes: Vec<u8> = grid.values.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
    std::fs::write(&data_path, bytes)?;
    let header = GridHeader {
        dims: grid.dims(),
        slice_depths: grid.slice_depths.clone(),
        data: name,
    };
    std::fs::write(header_path, serde_json::to_string_pretty(&header)?)?;
    Ok(())
}

pub fn read_opacity_grid(header_path: &Path) -> Result<OpacityGrid> {
    let header: GridHeader = serde_json::from_str(&std::fs::read_to_string(header_path)?)?;
    let data_path = header_path.parent().unwrap_or(Path::new(".")).join(&header.data);
    let bytes = std::fs::read(data_path)?;
    let [d, h, w] = header.dims;
    if bytes.len() != 4 * d * h * w {
        return Err(Error::format("opacity grid", format!("expected {} bytes, got {}", 4 * d * h * w, bytes.len())));
    }
    let values = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    OpacityGrid::new(header.dims, values, header.slice_depths)
}
