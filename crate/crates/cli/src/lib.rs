//! Command-line front end: argument parsing, artifact writing and the run
//! manifest.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use rgbd_consist::autodiff::GradCheckConfig;
use rgbd_consist::camera::{relative_transform, sample_poses, CameraIntrinsics, CameraPose};
use rgbd_consist::config::ExperimentConfig;
use rgbd_consist::generator::{config_hash, recover_depth, train_with, write_checkpoint};
use rgbd_consist::geometry::{compute_warp_field, normal_map, occlusion_mask, unproject, warp_image, RgbdImage};
use rgbd_consist::io::{
    read_view, write_depth_colormap_png, write_pfm, write_rgb_png, write_view, export_ply, ViewMeta,
};
use rgbd_consist::losses::loss_3d;
use rgbd_consist::metrics::{consistency_scores, load_view_sets, mean_scores, PolarCellConfig};
use rgbd_consist::oracle::render_rgbd;
use rgbd_consist::voxel::{accumulative_keep, accumulative_projection_weights, expected_depth, project_grid};
use rgbd_consist::{gradsuite, io::viridis, Error};

pub const THREADS_ENV: &str = "RGBD_CONSIST_THREADS";

#[derive(Debug, Parser)]
#[command(name = "rgbd-consist", version, about = "RGBD multi-view consistency toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Experiment config (JSON); defaults apply when omitted
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Output directory [default: config out_dir, else ./out]
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Overrides `seed` and `train.seed` from the config
    #[arg(long, value_name = "N")]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ViewPair {
    /// First view as a `<prefix>` of `.png`/`.pfm`/`.json`; both views are
    /// rendered from the config scene at pose_a/pose_b when omitted
    #[arg(long, value_name = "PREFIX", requires = "view_b")]
    pub view_a: Option<PathBuf>,
    /// Second view prefix
    #[arg(long, value_name = "PREFIX", requires = "view_a")]
    pub view_b: Option<PathBuf>,
    /// Supersampling factor for rendered views [default: config supersample]
    #[arg(long, value_name = "N")]
    pub supersample: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Face,
    Car,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render PNG/PFM/JSON view triplets of the config scene at sampled poses
    Render {
        #[command(flatten)]
        common: Common,
        /// Number of views
        #[arg(long, value_name = "N", default_value_t = 20)]
        views: usize,
        /// Supersampling factor [default: config supersample]
        #[arg(long, value_name = "N")]
        supersample: Option<usize>,
        /// Latent id written into every pose JSON
        #[arg(long, value_name = "ID", default_value = "scene")]
        latent_id: String,
    },
    /// Warp view B into view A and write the occlusion mask
    Warp {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        pair: ViewPair,
    },
    /// Evaluate the symmetric 3D loss between two views
    LossEval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        pair: ViewPair,
    },
    /// Finite-difference check of every loss on random 8x8 pairs
    GradCheck {
        #[command(flatten)]
        common: Common,
        /// Number of consecutive seeds starting at the seed
        #[arg(long, value_name = "N", default_value_t = 10)]
        seeds: u64,
    },
    /// Optimise view A's depth against view B from a constant start
    RecoverDepth {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        pair: ViewPair,
        /// Constant initial depth
        #[arg(long, value_name = "D", default_value_t = 1.0)]
        init_depth: f64,
    },
    /// Train the toy RGBD generator and write a log and checkpoint
    TrainToy {
        #[command(flatten)]
        common: Common,
    },
    /// Score V_depth/V_color over a directory of views grouped by latent id
    Metrics {
        #[command(flatten)]
        common: Common,
        /// Directory of view triplets
        #[arg(long, value_name = "DIR")]
        input: PathBuf,
        /// Use a preset origin and angular range instead of the config
        #[arg(long, value_enum)]
        preset: Option<Preset>,
        /// Bins per angular axis for a preset [default: image height]
        #[arg(long, value_name = "N")]
        bins: Option<usize>,
    },
    /// Write a world-space point cloud (PLY) and normal map of one view
    ExportPly {
        #[command(flatten)]
        common: Common,
        /// View prefix; the config scene is rendered at pose_a when omitted
        #[arg(long, value_name = "PREFIX")]
        input: Option<PathBuf>,
        /// Supersampling factor for a rendered view [default: config supersample]
        #[arg(long, value_name = "N")]
        supersample: Option<usize>,
    },
    /// Project an opacity grid with accumulative occlusion
    OcclusionDemo {
        #[command(flatten)]
        common: Common,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Render { .. } => "render",
            Command::Warp { .. } => "warp",
            Command::LossEval { .. } => "loss-eval",
            Command::GradCheck { .. } => "grad-check",
            Command::RecoverDepth { .. } => "recover-depth",
            Command::TrainToy { .. } => "train-toy",
            Command::Metrics { .. } => "metrics",
            Command::ExportPly { .. } => "export-ply",
            Command::OcclusionDemo { .. } => "occlusion-demo",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::Render { common, .. }
            | Command::Warp { common, .. }
            | Command::LossEval { common, .. }
            | Command::GradCheck { common, .. }
            | Command::RecoverDepth { common, .. }
            | Command::TrainToy { common }
            | Command::Metrics { common, .. }
            | Command::ExportPly { common, .. }
            | Command::OcclusionDemo { common } => common,
        }
    }
}

/// Failure with a stable code. Config failures exit with 2, everything
/// else with 1.
#[derive(Debug)]
pub struct CliError {
    pub code: &'static str,
    pub message: String,
    pub config: bool,
}

impl CliError {
    fn new(code: &'static str, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
            config: false,
        }
    }

    fn config(e: Error) -> Self {
        Self {
            code: "E_CONFIG",
            message: e.to_string(),
            config: true,
        }
    }

    pub fn exit_code(&self) -> i32 {
        if self.config {
            2
        } else {
            1
        }
    }

    /// `error[CODE]: message` on one line.
    pub fn line(&self) -> String {
        format!("error[{}]: {}", self.code, self.message.replace('\n', " "))
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        Self::new(e.code(), e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Error::from(e).into()
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Error::from(e).into()
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Applies `RGBD_CONSIST_THREADS` to the global rayon pool.
pub fn configure_threads() -> CliResult<()> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::new("E_ENV", format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::new("E_ENV", e.to_string()))
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'a str,
    config_hash: String,
    seed: u64,
    started_unix_s: u64,
    wall_time_s: f64,
    outputs: &'a [String],
}

struct Run {
    cfg: ExperimentConfig,
    out: PathBuf,
    outputs: Vec<String>,
}

impl Run {
    fn path(&mut self, name: &str) -> PathBuf {
        self.outputs.push(name.to_string());
        self.out.join(name)
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> CliResult<()> {
        let p = self.path(name);
        fs::write(p, serde_json::to_vec_pretty(value)?)?;
        Ok(())
    }

    fn write_text(&mut self, name: &str, text: &str) -> CliResult<()> {
        let p = self.path(name);
        fs::write(p, text)?;
        Ok(())
    }

    fn intrinsics(&self) -> CliResult<CameraIntrinsics> {
        Ok(CameraIntrinsics::from_image_size(self.cfg.image_size)?)
    }

    fn render(&self, pose: &CameraPose, supersample: Option<usize>) -> CliResult<RgbdImage> {
        let s = self.cfg.image_size;
        let ss = supersample.unwrap_or(self.cfg.supersample);
        Ok(render_rgbd(&self.cfg.scene, &self.intrinsics()?, pose, s, s, ss)?)
    }

    /// Views A and B with their poses and shared intrinsics.
    fn pair(&self, pair: &ViewPair) -> CliResult<([(RgbdImage, CameraPose); 2], CameraIntrinsics)> {
        match (&pair.view_a, &pair.view_b) {
            (Some(a), Some(b)) => {
                let (ia, ma) = read_view(a)?;
                let (ib, mb) = read_view(b)?;
                let k = square_intrinsics(&ia)?;
                if (ib.width(), ib.height()) != (ia.width(), ia.height()) {
                    return Err(CliError::new("E_SHAPE", "views differ in size"));
                }
                Ok(([(ia, ma.pose), (ib, mb.pose)], k))
            }
            _ => {
                let (pa, pb) = (self.cfg.pose_a, self.cfg.pose_b);
                Ok((
                    [(self.render(&pa, pair.supersample)?, pa), (self.render(&pb, pair.supersample)?, pb)],
                    self.intrinsics()?,
                ))
            }
        }
    }
}

fn square_intrinsics(img: &RgbdImage) -> CliResult<CameraIntrinsics> {
    if img.width() != img.height() {
        return Err(CliError::new(
            "E_SHAPE",
            format!("views must be square, got {}x{}", img.width(), img.height()),
        ));
    }
    Ok(CameraIntrinsics::from_image_size(img.width())?)
}

fn load_config(common: &Common) -> CliResult<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::config(Error::from(e)))?;
            ExperimentConfig::from_json(&text).map_err(CliError::config)?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
        cfg.train.seed = seed;
    }
    cfg.validate().map_err(CliError::config)?;
    Ok(cfg)
}

fn check_supersample(s: Option<usize>) -> CliResult<()> {
    if s == Some(0) {
        return Err(CliError::config(Error::Invalid {
            what: "supersample",
            reason: "must be at least 1".into(),
        }));
    }
    Ok(())
}

/// Runs a parsed command. The manifest is written even when the command
/// fails.
pub fn run(cli: Cli) -> CliResult<()> {
    let start = Instant::now();
    let started_unix_s = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let command = cli.command;
    let common = command.common();
    let cfg = load_config(common)?;
    let out = common
        .out
        .clone()
        .or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    fs::create_dir_all(&out)?;
    let hash = config_hash(&cfg)?;
    let seed = cfg.seed;
    let mut run = Run {
        cfg,
        out,
        outputs: Vec::new(),
    };
    let result = dispatch(&command, &mut run);
    let manifest = Manifest {
        command: command.name(),
        version: env!("CARGO_PKG_VERSION"),
        config_hash: hash,
        seed,
        started_unix_s,
        wall_time_s: start.elapsed().as_secs_f64(),
        outputs: &run.outputs,
    };
    fs::write(run.out.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    result
}

fn dispatch(command: &Command, run: &mut Run) -> CliResult<()> {
    match command {
        Command::Render {
            views,
            supersample,
            latent_id,
            ..
        } => cmd_render(run, *views, *supersample, latent_id),
        Command::Warp { pair, .. } => cmd_warp(run, pair),
        Command::LossEval { pair, .. } => cmd_loss_eval(run, pair),
        Command::GradCheck { seeds, .. } => cmd_grad_check(run, *seeds),
        Command::RecoverDepth { pair, init_depth, .. } => cmd_recover(run, pair, *init_depth),
        Command::TrainToy { .. } => cmd_train(run),
        Command::Metrics {
            input, preset, bins, ..
        } => cmd_metrics(run, input, *preset, *bins),
        Command::ExportPly { input, supersample, .. } => cmd_export_ply(run, input.as_deref(), *supersample),
        Command::OcclusionDemo { .. } => cmd_occlusion(run),
    }
}

fn cmd_render(run: &mut Run, views: usize, supersample: Option<usize>, latent_id: &str) -> CliResult<()> {
    check_supersample(supersample)?;
    for (i, pose) in sample_poses(&run.cfg.poses, views, run.cfg.seed).into_iter().enumerate() {
        let img = run.render(&pose, supersample)?;
        let stem = format!("view_{i:04}");
        let meta = ViewMeta {
            latent_id: latent_id.to_string(),
            pose,
        };
        write_view(&run.out.join(&stem), &img, &meta)?;
        for ext in ["png", "pfm", "json"] {
            run.outputs.push(format!("{stem}.{ext}"));
        }
    }
    Ok(())
}

fn cmd_warp(run: &mut Run, pair: &ViewPair) -> CliResult<()> {
    check_supersample(pair.supersample)?;
    let ([(a, pa), (b, pb)], k) = run.pair(pair)?;
    let (w, h) = (a.width(), a.height());
    let t12 = relative_transform(&pa.extrinsics(), &pb.extrinsics());
    let wf = compute_warp_field(a.depth(), w, h, &k, &t12)?;
    let warped = warp_image(&b, &wf)?;
    let mask = occlusion_mask(&wf, &warped.depth, run.cfg.loss.occlusion_margin)?;
    let rgb: Vec<f64> = warped
        .rgb
        .chunks(3)
        .zip(&warped.valid)
        .flat_map(|(c, &v)| if v { [c[0], c[1], c[2]] } else { [0.0; 3] })
        .collect();
    let mask_rgb: Vec<f64> = mask.keep.iter().flat_map(|&k| [if k { 1.0 } else { 0.0 }; 3]).collect();
    let mut err = 0.0;
    for (i, _) in mask.keep.iter().enumerate().filter(|(_, &k)| k) {
        err += (0..3).map(|c| (warped.rgb[3 * i + c] - a.rgb()[3 * i + c]).abs()).sum::<f64>() / 3.0;
    }
    let kept = mask.count();
    let p = run.path("warped.png");
    write_rgb_png(&p, w, h, &rgb)?;
    let p = run.path("warped.pfm");
    write_pfm(&p, w, h, &warped.depth)?;
    let p = run.path("mask.png");
    write_rgb_png(&p, w, h, &mask_rgb)?;
    run.write_json(
        "warp.json",
        &json!({
            "pixels": w * h,
            "valid": wf.valid.iter().filter(|&&v| v).count(),
            "kept": kept,
            "mean_abs_rgb_on_mask": if kept > 0 { err / kept as f64 } else { 0.0 },
        }),
    )
}

pub const LOSS_CSV_HEADER: &str = "photometric,depth_consistency,masked_fraction,empty_mask";

fn cmd_loss_eval(run: &mut Run, pair: &ViewPair) -> CliResult<()> {
    check_supersample(pair.supersample)?;
    let ([(a, pa), (b, pb)], k) = run.pair(pair)?;
    let l = loss_3d(&a, &b, &k, &pa, &pb, &run.cfg.loss)?;
    let csv = format!(
        "{LOSS_CSV_HEADER}\n{:e},{:e},{},{}\n",
        l.photometric, l.depth_consistency, l.masked_fraction, l.empty_mask
    );
    run.write_text("loss.csv", &csv)
}

fn cmd_grad_check(run: &mut Run, seeds: u64) -> CliResult<()> {
    let start = run.cfg.seed;
    let cases = gradsuite::run_suite(start..start + seeds, &GradCheckConfig::default())?;
    let mut csv = format!("{}\n", gradsuite::CSV_HEADER);
    for c in &cases {
        csv.push_str(&c.csv_row());
        csv.push('\n');
    }
    run.write_text("grad_check.csv", &csv)?;
    let failed: Vec<String> = cases
        .iter()
        .filter(|c| !c.report.passed())
        .map(|c| format!("{}/{}", c.name, c.seed))
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::new("E_GRADCHECK", format!("failed cases: {}", failed.join(" "))))
    }
}

fn cmd_recover(run: &mut Run, pair: &ViewPair, init_depth: f64) -> CliResult<()> {
    check_supersample(pair.supersample)?;
    if !(init_depth > 0.0) {
        return Err(CliError::new("E_INVALID", format!("init depth must be positive, got {init_depth}")));
    }
    let ([(a, pa), (b, pb)], k) = run.pair(pair)?;
    let (w, h) = (a.width(), a.height());
    let res = recover_depth(&a, &vec![init_depth; w * h], &b, &k, &pa, &pb, &run.cfg.recover)?;
    let far = run.cfg.scene.far_depth;
    let mut rel: Vec<f64> = res
        .depth
        .iter()
        .zip(a.depth())
        .filter(|(_, &r)| r > 0.0 && r < far)
        .map(|(d, r)| (d - r).abs() / r)
        .collect();
    rel.sort_by(f64::total_cmp);
    let median = rel.get(rel.len() / 2).copied();
    let p = run.path("depth.pfm");
    write_pfm(&p, w, h, &res.depth)?;
    let p = run.path("depth.png");
    write_depth_colormap_png(&p, w, h, &res.depth)?;
    let mut csv = String::from("step,objective\n");
    for (i, l) in res.losses.iter().enumerate() {
        csv.push_str(&format!("{i},{l:e}\n"));
    }
    run.write_text("recover_log.csv", &csv)?;
    run.write_json(
        "recover.json",
        &json!({
            "steps": res.losses.len(),
            "initial_objective": res.losses.first(),
            "final_objective": res.losses.last(),
            "median_relative_error": median,
            "reference_pixels": rel.len(),
        }),
    )
}

fn cmd_train(run: &mut Run) -> CliResult<()> {
    let cfg = run.cfg.train.clone();
    let every = (cfg.iterations / 20).max(1);
    let outcome = train_with(&cfg, |it, r| {
        if (it + 1) % every == 0 {
            log::info!("iteration {}: total {:.5} photometric {:.5}", it + 1, r.total, r.photometric);
        }
    })?;
    run.write_text("train_log.csv", &outcome.log.csv())?;
    let dir = run.path("checkpoint");
    write_checkpoint(&dir, &cfg, &outcome)?;
    Ok(())
}

pub const METRICS_CSV_HEADER: &str = "latent_id,views,v_depth,v_color,populated_cell_fraction";

fn cmd_metrics(run: &mut Run, input: &Path, preset: Option<Preset>, bins: Option<usize>) -> CliResult<()> {
    if !input.is_dir() {
        return Err(CliError::new("E_IO", format!("{}: not a directory", input.display())));
    }
    let sets = load_view_sets(input)?;
    if sets.is_empty() {
        return Err(CliError::new(
            "E_INVALID",
            format!("{}: no latent id has two or more views", input.display()),
        ));
    }
    let k = square_intrinsics(&sets[0].views[0].image)?;
    let height = sets[0].views[0].image.height();
    let cell_cfg = match preset {
        Some(Preset::Face) => PolarCellConfig::face(bins.unwrap_or(height)),
        Some(Preset::Car) => PolarCellConfig::car(bins.unwrap_or(height)),
        None => {
            let mut c = run.cfg.metrics.clone();
            if let Some(b) = bins {
                c.bins_azimuth = b;
                c.bins_elevation = b;
            }
            c
        }
    };
    cell_cfg.validate().map_err(CliError::config)?;
    let mut csv = format!("{METRICS_CSV_HEADER}\n");
    let mut scores = Vec::new();
    for set in &sets {
        if set.views[0].image.width() != height {
            return Err(CliError::new("E_SHAPE", format!("latent {}: image size differs", set.latent_id)));
        }
        let s = consistency_scores(set, &k, &cell_cfg)?;
        csv.push_str(&format!(
            "{},{},{:e},{:e},{}\n",
            set.latent_id,
            set.views.len(),
            s.v_depth,
            s.v_color,
            s.populated_cell_fraction
        ));
        scores.push(s);
    }
    let m = mean_scores(&scores).expect("at least one set");
    let total: usize = sets.iter().map(|s| s.views.len()).sum();
    csv.push_str(&format!(
        "mean,{total},{:e},{:e},{}\n",
        m.v_depth, m.v_color, m.populated_cell_fraction
    ));
    run.write_text("metrics.csv", &csv)?;
    run.write_json("metrics_config.json", &cell_cfg)
}

fn cmd_export_ply(run: &mut Run, input: Option<&Path>, supersample: Option<usize>) -> CliResult<()> {
    check_supersample(supersample)?;
    let (img, pose, k) = match input {
        Some(prefix) => {
            let (img, meta) = read_view(prefix)?;
            let k = square_intrinsics(&img)?;
            (img, meta.pose, k)
        }
        None => {
            let pose = run.cfg.pose_a;
            (run.render(&pose, supersample)?, pose, run.intrinsics()?)
        }
    };
    let un = unproject(&img, &k, &pose.extrinsics());
    let p = run.path("cloud.ply");
    export_ply(&un.cloud, &p)?;
    let (w, h) = (img.width(), img.height());
    let normals = normal_map(img.depth(), w, h, &k)?;
    let rgb: Vec<f64> = normals.iter().flat_map(|n| n.map(|v| 0.5 * (v + 1.0))).collect();
    let p = run.path("normals.png");
    write_rgb_png(&p, w, h, &rgb)?;
    run.write_json(
        "export.json",
        &json!({ "points": un.cloud.len(), "skipped": un.skipped }),
    )
}

fn cmd_occlusion(run: &mut Run) -> CliResult<()> {
    let occ = run.cfg.occlusion.clone();
    let grid = occ.load_grid().map_err(CliError::config)?;
    let [d, h, w] = grid.dims();
    let weights = accumulative_projection_weights(&grid);
    let dm = expected_depth(&weights, grid.slice_depths(), occ.far_depth)?;
    let plane = h * w;
    // each slice gets its own colour so the projection shows which slice wins
    let mut features = Vec::with_capacity(d * plane * 3);
    for k in 0..d {
        let c = viridis(if d > 1 { k as f64 / (d - 1) as f64 } else { 0.0 });
        for _ in 0..plane {
            features.extend_from_slice(&c);
        }
    }
    let rgb = project_grid(&features, 3, &weights)?;
    let keep = accumulative_keep(&grid);
    let clamped = grid.values().iter().zip(&keep).filter(|(&v, &k)| v > 0.0 && !k).count();
    let p = run.path("depth.pfm");
    write_pfm(&p, w, h, &dm.depth)?;
    let p = run.path("depth.png");
    write_depth_colormap_png(&p, w, h, &dm.depth)?;
    let p = run.path("features.png");
    write_rgb_png(&p, w, h, &rgb)?;
    run.write_json(
        "occlusion.json",
        &json!({
            "dims": [d, h, w],
            "background_pixels": dm.background.iter().filter(|&&b| b).count(),
            "clamped_voxels": clamped,
            "occupied_voxels": grid.values().iter().filter(|&&v| v > 0.0).count(),
        }),
    )
}
