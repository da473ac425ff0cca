use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{sample_latent, Discriminator, GeneratorSpec};
use crate::autodiff::{adam_step, pairwise_sum, tree_sum, AdamConfig, AdamState, Tape, Tensor, Var};
use crate::camera::{sample_pose_pair, CameraIntrinsics, CameraPose, PoseDistribution};
use crate::error::{Error, Result};
use crate::losses::{
    depth_floor_var, discriminator_adv_var, generator_adv_var, generator_objective, generator_objective_var, loss_3d_var,
    Loss3dTerms, LossReport, LossWeights, CSV_HEADER,
};
use crate::oracle::{render_rgbd, Scene};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub generator: GeneratorSpec,
    pub discriminator_hidden: usize,
    pub weights: LossWeights,
    pub poses: PoseDistribution,
    /// Source of real images.
    pub scene: Scene,
    pub supersample: usize,
    pub batch_size: usize,
    pub iterations: usize,
    pub lr_generator: f64,
    pub lr_discriminator: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            generator: GeneratorSpec::default(),
            discriminator_hidden: 64,
            weights: LossWeights::default(),
            poses: PoseDistribution::from_degrees(60.0, 10.0, 30.0).expect("valid default"),
            scene: Scene::toy_object(),
            supersample: 1,
            batch_size: 8,
            iterations: 500,
            lr_generator: 1e-3,
            lr_discriminator: 3e-3,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.weights.validate()?;
        self.scene.validate()?;
        if self.batch_size == 0 || self.iterations == 0 || self.supersample == 0 || self.discriminator_hidden == 0 {
            return Err(Error::invalid("train config", "counts must be positive"));
        }
        for (name, lr) in [("lr_generator", self.lr_generator), ("lr_discriminator", self.lr_discriminator)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::invalid("train config", format!("{name} must be positive, got {lr}")));
            }
        }
        Ok(())
    }

    pub fn discriminator(&self) -> Discriminator {
        let s = self.generator.output_size;
        Discriminator::new(s * s * 3, self.discriminator_hidden).expect("validated sizes")
    }
}

/// Lowercase hex SHA-256 of the config's JSON form.
pub fn config_hash<T: Serialize>(cfg: &T) -> Result<String> {
    let bytes = serde_json::to_vec(cfg)?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub reports: Vec<LossReport>,
    pub d_loss: Vec<f64>,
    pub r1: Vec<f64>,
    /// Largest gradient magnitude on the depth column of the output layer.
    pub depth_grad_max_abs: Vec<f64>,
}

impl TrainLog {
    pub fn csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for (i, r) in self.reports.iter().enumerate() {
            s.push_str(&r.csv_row(i + 1));
            s.push('\n');
        }
        s
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub generator: Vec<Tensor>,
    pub discriminator: Vec<Tensor>,
    pub log: TrainLog,
}

struct GeneratorSample {
    grads: Vec<Tensor>,
    adv: f64,
    photometric: f64,
    depth_consistency: f64,
    floor: f64,
    masked_fraction: f64,
    fakes: [Vec<f64>; 2],
}

struct Batch {
    latents: Vec<Vec<f64>>,
    pairs: Vec<(CameraPose, CameraPose)>,
    reals: Vec<Vec<f64>>,
}

fn mean_of(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    pairwise_sum(&v) / v.len() as f64
}

fn mean_grads(per_sample: &[Vec<Tensor>]) -> Vec<Tensor> {
    let n = per_sample.len() as f64;
    (0..per_sample[0].len())
        .map(|i| {
            let column: Vec<Tensor> = per_sample.iter().map(|g| g[i].clone()).collect();
            tree_sum(&column).expect("non-empty batch").map(|v| v / n)
        })
        .collect()
}

fn add_scaled(into: &mut [Tensor], other: &[Tensor], c: f64) {
    for (a, b) in into.iter_mut().zip(other) {
        for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
            *x += c * y;
        }
    }
}

fn generator_sample(
    cfg: &TrainConfig,
    disc: &Discriminator,
    k: &CameraIntrinsics,
    g_params: &[Tensor],
    d_params: &[Tensor],
    z: &[f64],
    (c1, c2): &(CameraPose, CameraPose),
) -> Result<GeneratorSample> {
    let tape = Tape::new();
    let gv: Vec<Var<'_>> = g_params.iter().map(|p| tape.input(p.clone())).collect();
    let dv: Vec<Var<'_>> = d_params.iter().map(|p| tape.constant(p.clone())).collect();
    let (rgb1, depth1) = cfg.generator.forward(&tape, &gv, z, c1)?;
    let (rgb2, depth2) = cfg.generator.forward(&tape, &gv, z, c2)?;
    let adv = generator_adv_var(disc.logit_var(&dv, rgb1)?)
        .add(generator_adv_var(disc.logit_var(&dv, rgb2)?))?
        .scale(0.5);
    let w = &cfg.weights;
    let l3d = loss_3d_var(rgb1, depth1, rgb2, depth2, k, &c1.extrinsics(), &c2.extrinsics(), w.occlusion_margin)?;
    let floor = depth_floor_var(depth1, w.d_min).add(depth_floor_var(depth2, w.d_min))?.scale(0.5);
    let total = generator_objective_var(adv, l3d.photometric, l3d.depth_consistency, floor, w)?;
    let grads = tape.backward(total)?;
    Ok(GeneratorSample {
        grads: gv.iter().map(|&v| grads.wrt(v)).collect(),
        adv: adv.item(),
        photometric: l3d.photometric.item(),
        depth_consistency: l3d.depth_consistency.item(),
        floor: floor.item(),
        masked_fraction: l3d.masked_fraction(),
        fakes: [rgb1.value().into_data(), rgb2.value().into_data()],
    })
}

/// Gradient and value of `softplus(-D(real)) + mean_fakes softplus(D(fake))
/// + γ/2 ‖∇D(real)‖²` for one batch item.
fn discriminator_sample(
    disc: &Discriminator,
    d_params: &[Tensor],
    real: &[f64],
    fakes: &[Vec<f64>; 2],
    r1_weight: f64,
) -> Result<(Vec<Tensor>, f64, f64)> {
    let tape = Tape::new();
    let dv: Vec<Var<'_>> = d_params.iter().map(|p| tape.input(p.clone())).collect();
    let real_logit = disc.logit_var(&dv, tape.constant(Tensor::new(&[1, real.len()], real.to_vec())?))?;
    let fake_logits: Vec<Var<'_>> = fakes
        .iter()
        .map(|f| disc.logit_var(&dv, tape.constant(Tensor::new(&[1, f.len()], f.clone())?)))
        .collect::<Result<_>>()?;
    let fake = tape.concat(&fake_logits, 0)?;
    let loss = discriminator_adv_var(real_logit, fake)?;
    let grads = tape.backward(loss)?;
    let mut out: Vec<Tensor> = dv.iter().map(|&v| grads.wrt(v)).collect();
    let r1 = disc.r1(d_params, real)?;
    add_scaled(&mut out, &r1.grads, 0.5 * r1_weight);
    Ok((out, loss.item(), r1.penalty))
}

fn draw_batch(cfg: &TrainConfig, k: &CameraIntrinsics, rng: &mut ChaCha8Rng) -> Result<Batch> {
    let b = cfg.batch_size;
    let latents: Vec<Vec<f64>> = (0..b).map(|_| sample_latent(cfg.generator.latent_dim, rng)).collect();
    let pairs: Vec<(CameraPose, CameraPose)> = (0..b).map(|_| sample_pose_pair(&cfg.poses, rng)).collect();
    let real_poses: Vec<CameraPose> = (0..b).map(|_| cfg.poses.sample_pose(rng)).collect();
    let s = cfg.generator.output_size;
    let reals = real_poses
        .par_iter()
        .map(|p| render_rgbd(&cfg.scene, k, p, s, s, cfg.supersample).map(|img| img.rgb().to_vec()))
        .collect::<Result<Vec<_>>>()?;
    Ok(Batch { latents, pairs, reals })
}

pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(cfg, |_, _| {})
}

/// Alternating generator and discriminator Adam steps. `on_iteration`
/// receives the 1-based iteration and its generator report.
pub fn train_with(cfg: &TrainConfig, mut on_iteration: impl FnMut(usize, &LossReport)) -> Result<TrainOutcome> {
    cfg.validate()?;
    let disc = cfg.discriminator();
    let k = CameraIntrinsics::from_image_size(cfg.generator.output_size)?;
    let mut g_params = cfg.generator.init_params(cfg.seed)?;
    let mut d_params = disc.init_params(cfg.seed.wrapping_add(1));
    let mut g_state = AdamState::new(&g_params);
    let mut d_state = AdamState::new(&d_params);
    let g_adam = AdamConfig::with_lr(cfg.lr_generator);
    let d_adam = AdamConfig::with_lr(cfg.lr_discriminator);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(2));
    let depth_w = cfg.generator.output_weight_index();
    let mut log = TrainLog::default();

    for it in 1..=cfg.iterations {
        let batch = draw_batch(cfg, &k, &mut rng)?;

        let samples = (0..cfg.batch_size)
            .into_par_iter()
            .map(|b| generator_sample(cfg, &disc, &k, &g_params, &d_params, &batch.latents[b], &batch.pairs[b]))
            .collect::<Result<Vec<_>>>()?;
        let grads = mean_grads(&samples.iter().map(|s| s.grads.clone()).collect::<Vec<_>>());
        let terms = Loss3dTerms {
            photometric: mean_of(samples.iter().map(|s| s.photometric)),
            depth_consistency: mean_of(samples.iter().map(|s| s.depth_consistency)),
            masked_fraction: mean_of(samples.iter().map(|s| s.masked_fraction)),
        };
        let adv = mean_of(samples.iter().map(|s| s.adv));
        let floor = mean_of(samples.iter().map(|s| s.floor));
        let report = generator_objective(adv, terms, floor, &cfg.weights)?;
        if !report.total.is_finite() {
            return Err(Error::NonFinite { term: "total".into() });
        }
        let w = &grads[depth_w];
        let cols = w.shape()[1];
        log.depth_grad_max_abs
            .push(w.data().iter().skip(3).step_by(cols).fold(0.0, |m: f64, v| m.max(v.abs())));
        adam_step(&mut g_params, &grads, &mut g_state, &g_adam)?;

        let d_samples = (0..cfg.batch_size)
            .into_par_iter()
            .map(|b| discriminator_sample(&disc, &d_params, &batch.reals[b], &samples[b].fakes, cfg.weights.r1_weight))
            .collect::<Result<Vec<_>>>()?;
        let d_loss = mean_of(d_samples.iter().map(|s| s.1));
        let r1 = mean_of(d_samples.iter().map(|s| s.2));
        if !(d_loss.is_finite() && r1.is_finite()) {
            return Err(Error::NonFinite {
                term: "discriminator".into(),
            });
        }
        let d_grads = mean_grads(&d_samples.into_iter().map(|s| s.0).collect::<Vec<_>>());
        adam_step(&mut d_params, &d_grads, &mut d_state, &d_adam)?;

        on_iteration(it, &report);
        log.reports.push(report);
        log.d_loss.push(d_loss + 0.5 * cfg.weights.r1_weight * r1);
        log.r1.push(r1);
    }
    Ok(TrainOutcome {
        generator: g_params,
        discriminator: d_params,
        log,
    })
}
