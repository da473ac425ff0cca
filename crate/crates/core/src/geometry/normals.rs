use nalgebra::Vector3;

use crate::camera::CameraIntrinsics;
use crate::error::{Error, Result};

/// Camera-space unit normals from finite differences of unprojected
/// neighbours (central inside, one-sided on the border). Normals face the
/// camera: a fronto-parallel plane yields `(0, 0, -1)`.
pub fn normal_map(depth: &[f64], width: usize, height: usize, k: &CameraIntrinsics) -> Result<Vec<[f64; 3]>> {
    if width < 2 || height < 2 || depth.len() != width * height {
        return Err(Error::ShapeMismatch {
            op: "normal_map",
            lhs: vec![height, width],
            rhs: vec![depth.len()],
        });
    }
    let point = |x: usize, y: usize| k.unproject(x as f64, y as f64, depth[y * width + x]);
    let mut out = Vec::with_capacity(width * height);
    for y in 0..height {
        let (y0, y1) = (y.saturating_sub(1), (y + 1).min(height - 1));
        for x in 0..width {
            let (x0, x1) = (x.saturating_sub(1), (x + 1).min(width - 1));
            let dx: Vector3<f64> = point(x1, y) - point(x0, y);
            let dy: Vector3<f64> = point(x, y1) - point(x, y0);
            let n = dy.cross(&dx);
            let len = n.norm();
            out.push(if len > 0.0 && len.is_finite() {
                [n.x / len, n.y / len, n.z / len]
            } else {
                [0.0, 0.0, -1.0]
            });
        }
    }
    Ok(out)
}
