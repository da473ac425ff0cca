//! Camera-conditioned toy RGBD generator, its discriminator, the training
//! loop and direct depth recovery.

mod checkpoint;
mod discriminator;
mod recover;
mod train;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CheckpointManifest, TensorEntry};
pub use discriminator::{Discriminator, R1Term};
pub use recover::{recover_depth, RecoverConfig, RecoverResult};
pub use train::{config_hash, train, train_with, TrainConfig, TrainLog, TrainOutcome};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::camera::{cyclic_encode, CameraPose};
use crate::error::{Error, Result};
use crate::geometry::RgbdImage;

pub const LEAK: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorSpec {
    pub latent_dim: usize,
    /// Widths of the dense layers applied to `concat(z, cyclic(pose))`.
    pub hidden: Vec<usize>,
    /// Channel count of the base grid, then of each 2× upsampling stage.
    pub channels: Vec<usize>,
    pub output_size: usize,
    pub depth_base: f64,
    pub depth_scale: f64,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            latent_dim: 16,
            hidden: vec![64],
            channels: vec![16, 16],
            output_size: 16,
            depth_base: 0.3,
            depth_scale: 1.0,
        }
    }
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 {
            return Err(Error::invalid("generator.latent_dim", "must be at least 1"));
        }
        if !matches!(self.output_size, 16 | 32) {
            return Err(Error::invalid("generator.output_size", format!("must be 16 or 32, got {}", self.output_size)));
        }
        if self.channels.is_empty() || self.channels.contains(&0) || self.hidden.contains(&0) {
            return Err(Error::invalid("generator.channels", "layer widths must be positive and channels non-empty"));
        }
        let ups = self.channels.len() - 1;
        if ups >= usize::BITS as usize || self.output_size % (1 << ups) != 0 {
            return Err(Error::invalid("generator.channels", "too many upsampling stages for the output size"));
        }
        if !(self.depth_base > 0.0 && self.depth_scale > 0.0) {
            return Err(Error::invalid("generator.depth", "depth_base and depth_scale must be positive"));
        }
        Ok(())
    }

    pub fn base_size(&self) -> usize {
        self.output_size >> (self.channels.len() - 1)
    }

    /// Names and shapes of the parameter tensors, in order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut width = self.latent_dim + 4;
        for (i, &h) in self.hidden.iter().enumerate() {
            out.push((format!("g.dense{i}.w"), vec![width, h]));
            out.push((format!("g.dense{i}.b"), vec![1, h]));
            width = h;
        }
        let b = self.base_size();
        out.push(("g.grid.w".into(), vec![width, b * b * self.channels[0]]));
        out.push(("g.grid.b".into(), vec![1, b * b * self.channels[0]]));
        for i in 1..self.channels.len() {
            out.push((format!("g.up{i}.w"), vec![self.channels[i - 1], self.channels[i]]));
            out.push((format!("g.up{i}.b"), vec![1, self.channels[i]]));
        }
        out.push(("g.out.w".into(), vec![*self.channels.last().expect("non-empty"), 4]));
        out.push(("g.out.b".into(), vec![1, 4]));
        out
    }

    /// Index of the output-layer weight; its last column drives depth.
    pub fn output_weight_index(&self) -> usize {
        self.param_shapes().len() - 2
    }

    /// He-style normal weights, zero biases.
    pub fn init_params(&self, seed: u64) -> Result<Vec<Tensor>> {
        self.validate()?;
        Ok(init_dense(&self.param_shapes(), seed))
    }

    /// RGB `[S, S, 3]` and depth `[S, S, 1]` on the tape.
    pub fn forward<'t>(&self, tape: &'t Tape, params: &[Var<'t>], z: &[f64], pose: &CameraPose) -> Result<(Var<'t>, Var<'t>)> {
        if z.len() != self.latent_dim {
            return Err(Error::ShapeMismatch {
                op: "generate",
                lhs: vec![self.latent_dim],
                rhs: vec![z.len()],
            });
        }
        let shapes = self.param_shapes();
        if params.len() != shapes.len() {
            return Err(Error::invalid("generator params", format!("expected {} tensors, got {}", shapes.len(), params.len())));
        }
        let mut input = z.to_vec();
        input.extend_from_slice(cyclic_encode(pose).as_slice());
        let mut x = tape.constant(Tensor::new(&[1, input.len()], input)?);
        let mut p = params.iter().copied();
        let mut next = || p.next().expect("parameter count checked");
        let dense = |x: Var<'t>, w: Var<'t>, b: Var<'t>| -> Result<Var<'t>> {
            let y = x.matmul(w)?;
            let rows = y.shape()[0];
            let cols = y.shape()[1];
            y.add(b.broadcast_to(&[rows, cols])?)
        };
        for _ in &self.hidden {
            x = dense(x, next(), next())?.leaky_relu(LEAK);
        }
        let b = self.base_size();
        x = dense(x, next(), next())?.leaky_relu(LEAK).reshape(&[b, b, self.channels[0]])?;
        let mut size = b;
        for i in 1..self.channels.len() {
            size *= 2;
            let up = x.upsample_nearest(2)?.reshape(&[size * size, self.channels[i - 1]])?;
            x = dense(up, next(), next())?.leaky_relu(LEAK).reshape(&[size, size, self.channels[i]])?;
        }
        let s = self.output_size;
        let flat = x.reshape(&[s * s, *self.channels.last().expect("non-empty")])?;
        let out = dense(flat, next(), next())?;
        let rgb = out.narrow(1, 0, 3)?.sigmoid().reshape(&[s, s, 3])?;
        let depth = out
            .narrow(1, 3, 1)?
            .softplus()
            .scale(self.depth_scale)
            .offset(self.depth_base)
            .reshape(&[s, s, 1])?;
        Ok((rgb, depth))
    }
}

pub(crate) fn init_dense(shapes: &[(String, Vec<usize>)], seed: u64) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    shapes
        .iter()
        .map(|(name, shape)| {
            if name.ends_with(".b") {
                return Tensor::zeros(shape);
            }
            let std = (2.0 / shape[0] as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("positive std");
            let n: usize = shape.iter().product();
            Tensor::new(shape, (0..n).map(|_| normal.sample(&mut rng)).collect()).expect("shape matches")
        })
        .collect()
}

/// One forward pass outside any training loop.
pub fn generate(spec: &GeneratorSpec, params: &[Tensor], z: &[f64], pose: &CameraPose) -> Result<RgbdImage> {
    spec.validate()?;
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = params.iter().map(|p| tape.constant(p.clone())).collect();
    let (rgb, depth) = spec.forward(&tape, &vars, z, pose)?;
    let s = spec.output_size;
    RgbdImage::new(s, s, rgb.value().into_data(), depth.value().into_data())
}

/// Latent vector of i.i.d. standard normals.
pub fn sample_latent<R: rand::Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    (0..dim).map(|_| normal.sample(rng)).collect()
}

/// Horizontal centroid of the pixels weighted by their colour distance from
/// `background`; `None` when the image matches the background everywhere.
pub fn horizontal_centroid(img: &RgbdImage, background: [f64; 3]) -> Option<f64> {
    let (mut num, mut den) = (0.0, 0.0);
    for y in 0..img.height() {
        for x in 0..img.width() {
            let c = img.color_at(x, y);
            let w: f64 = (0..3).map(|i| (c[i] - background[i]).abs()).sum::<f64>() / 3.0;
            num += w * x as f64;
            den += w;
        }
    }
    (den > 1e-12).then(|| num / den)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, GradCheckConfig};

    fn small() -> GeneratorSpec {
        GeneratorSpec {
            latent_dim: 3,
            hidden: vec![5],
            channels: vec![3, 2],
            ..GeneratorSpec::default()
        }
    }

    #[test]
    fn shapes_and_positive_depth() {
        let spec = GeneratorSpec::default();
        let params = spec.init_params(1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for i in 0..5 {
            let z: Vec<f64> = sample_latent(16, &mut rng).iter().map(|v| v * 10.0).collect();
            let pose = CameraPose::from_degrees(-170.0 + 80.0 * i as f64, 20.0, 1.0).unwrap();
            let img = generate(&spec, &params, &z, &pose).unwrap();
            assert_eq!((img.width(), img.height()), (16, 16));
            assert!(img.depth().iter().all(|&d| d > spec.depth_base));
            assert!(img.rgb().iter().all(|&c| (0.0..=1.0).contains(&c)));
        }
    }

    #[test]
    fn deterministic() {
        let spec = GeneratorSpec::default();
        let params = spec.init_params(7).unwrap();
        let z = vec![0.3; 16];
        let pose = CameraPose::from_degrees(12.0, -4.0, 1.0).unwrap();
        let a = generate(&spec, &params, &z, &pose).unwrap();
        let b = generate(&spec, &params, &z, &pose).unwrap();
        assert_eq!(a, b);
        assert_eq!(params, spec.init_params(7).unwrap());
    }

    #[test]
    fn continuous_across_azimuth_wrap() {
        let spec = GeneratorSpec::default();
        let params = spec.init_params(3).unwrap();
        let z = vec![-0.4; 16];
        let pi = std::f64::consts::PI;
        let diff = |a: f64, b: f64| {
            let x = generate(&spec, &params, &z, &CameraPose::new(a, 0.1, 1.0).unwrap()).unwrap();
            let y = generate(&spec, &params, &z, &CameraPose::new(b, 0.1, 1.0).unwrap()).unwrap();
            x.rgb().iter().zip(y.rgb()).chain(x.depth().iter().zip(y.depth())).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max)
        };
        let mut last = f64::INFINITY;
        for eps in [1e-2, 1e-3, 1e-4, 1e-5] {
            let d = diff(pi - eps / 2.0, -pi + eps / 2.0);
            assert!(d < last);
            last = d;
        }
        assert!(last < 1e-4);
        let across = diff(pi - 5e-5, -pi + 5e-5);
        let inside = diff(0.5 - 5e-5, 0.5 + 5e-5);
        assert!(across < 10.0 * inside.max(1e-12), "{across} vs {inside}");
    }

    #[test]
    fn rejects_bad_spec_and_latent() {
        assert!(GeneratorSpec { output_size: 24, ..GeneratorSpec::default() }.validate().is_err());
        assert!(GeneratorSpec { channels: vec![], ..GeneratorSpec::default() }.validate().is_err());
        let spec = GeneratorSpec::default();
        let params = spec.init_params(0).unwrap();
        let pose = CameraPose::new(0.0, 0.0, 1.0).unwrap();
        assert!(matches!(generate(&spec, &params, &[0.0; 3], &pose), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn forward_gradients_match_finite_differences() {
        let spec = small();
        let params = spec.init_params(11).unwrap();
        let pose = CameraPose::from_degrees(8.0, 3.0, 1.0).unwrap();
        let z = [0.2, -0.7, 1.1];
        let weights = Tensor::new(&[16, 16, 1], (0..256).map(|i| ((i * 37) % 11) as f64 / 11.0 - 0.5).collect()).unwrap();
        let report = grad_check(
            |tape, vars| {
                let (rgb, depth) = spec.forward(tape, vars, &z, &pose)?;
                let w = tape.constant(weights.clone());
                rgb.mean().add(depth.mul(w)?.sum())
            },
            &params,
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_err());
        assert!(report.checked() > 0);
    }

    #[test]
    fn centroid_of_single_pixel() {
        let mut rgb = vec![1.0; 16 * 16 * 3];
        let idx = (4 * 16 + 11) * 3;
        rgb[idx..idx + 3].copy_from_slice(&[0.0, 0.0, 0.0]);
        let img = RgbdImage::new(16, 16, rgb, vec![1.0; 256]).unwrap();
        assert_eq!(horizontal_centroid(&img, [1.0; 3]), Some(11.0));
        let blank = RgbdImage::uniform(16, 16, [1.0; 3], 1.0).unwrap();
        assert_eq!(horizontal_centroid(&blank, [1.0; 3]), None);
    }
}
