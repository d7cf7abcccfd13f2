//! Two-stage training. Stage 1 densifies while fitting the photometric and
//! momentum losses; stage 2 freezes densification, splits the cloud into
//! static and dynamic particles and adds Lagrangian flow matching.

use std::fs::{self, File, OpenOptions};
use std::io::{BufReader, BufWriter, Write as _};
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ad::{AdError, Tape, Tensor, Var};
use crate::deform::{DeformConfig, DeformationField};
use crate::flow::{
    decompose_backward, gaussian_flow, lagrangian_flow, velocity_flow, warp_flow_forward, FlowError, FlowField,
    MotionMask, PixelTerms,
};
use crate::geom::Vec3;
use crate::image::Image;
use crate::io::{read_checkpoint, write_checkpoint, Checkpoint, FormatError, ParticleRecord};
use crate::losses::{self, renders_loss, rgb_of, total_loss, LossError, LossWeights};
use crate::material::{MaterialConfig, MaterialField};
use crate::nn::ParamSet;
use crate::optim::{exp_decay, Adam, AdamSlot};
use crate::physics::{block_sampled_cmr, momentum_residual, ContinuumField, Domain, PhysicsError, ResidualOptions, ResidualSamples};
use crate::render::{project, project_one, project_velocity, render_pose, Camera, Projected, RenderOutput, RenderSettings};
use crate::scalar::Real;
use crate::scene::{
    densify, partition_dynamic, prune_by_scale, CloudTensors, DensifyParams, DensifyStats, GaussianCloud,
    GaussianParticle, RowOrigins, SceneBounds,
};
use crate::scenegen::SyntheticScene;

pub const CSV_HEADER: &str = "iter,loss_total,loss_renders,loss_cmr,loss_lpfm,psnr,num_gaussians";

/// Names of the per-particle tensors, in optimizer slot order.
pub const CLOUD_SLOTS: [&str; 5] = ["mu", "q", "log_scale", "sh", "opacity"];

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),
    #[error("scene data: {0}")]
    Data(String),
    #[error("iteration {iteration}: {source}")]
    Loss { iteration: usize, source: LossError },
    #[error(transparent)]
    Ad(#[from] AdError),
    #[error(transparent)]
    Physics(#[from] PhysicsError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

/// Loss terms disabled for ablation runs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    #[default]
    None,
    NoLpfm,
    NoPhysics,
}

impl Ablation {
    pub fn apply(self, w: &LossWeights) -> LossWeights {
        let mut w = *w;
        match self {
            Ablation::None => {}
            Ablation::NoLpfm => w.lambda_lpfm = 0.0,
            Ablation::NoPhysics => {
                w.lambda_lpfm = 0.0;
                w.lambda_cmr = 0.0;
            }
        }
        w
    }
}

impl std::str::FromStr for Ablation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(Ablation::None),
            "no-lpfm" => Ok(Ablation::NoLpfm),
            "no-physics" => Ok(Ablation::NoPhysics),
            _ => Err(format!("unknown ablation `{s}` (none, no-lpfm, no-physics)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearningRates {
    /// Center rate per unit of scene extent.
    pub position: f64,
    pub rotation: f64,
    pub scale: f64,
    pub color: f64,
    pub opacity: f64,
    /// Base rate of the deformation and material MLPs.
    pub decoder: f64,
    /// Hash tables learn this many times faster than the MLPs.
    pub grid_multiplier: f64,
    /// Rates decay by 0.1 every `decay_fraction · iterations` steps.
    pub decay_fraction: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            position: 1.6e-3,
            rotation: 1e-3,
            scale: 5e-3,
            color: 2.5e-3,
            opacity: 0.05,
            decoder: 2e-3,
            grid_multiplier: 20.0,
            decay_fraction: 0.4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DensifySchedule {
    pub params: DensifyParams,
    pub every: usize,
    /// First iteration at which densification may run.
    pub from: usize,
    /// Particles larger than this fraction of the scene extent are pruned.
    pub prune_scale: f64,
}

impl Default for DensifySchedule {
    fn default() -> Self {
        Self {
            params: DensifyParams {
                grad_threshold: 2e-4,
                percent_dense: 0.05,
                split_factor: 1.6,
                max_particles: usize::MAX,
            },
            every: 100,
            from: 100,
            prune_scale: 0.5,
        }
    }
}

/// Everything a run depends on. Serialized verbatim into checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Directory with the scene assets.
    pub scene: String,
    /// Output directory for metrics and checkpoints.
    pub out: String,
    pub seed: u64,
    /// `[width, height]` the scene must have.
    pub image_size: [usize; 2],
    pub iterations: usize,
    /// Fraction of `iterations` after which densification stops and the
    /// static/dynamic refinement begins.
    pub stage_switch: f64,
    pub weights: LossWeights,
    pub ablation: Ablation,
    pub top_k: usize,
    /// Residual samples per step (at most one per particle).
    pub cmr_samples: usize,
    pub cmr_block: usize,
    pub density: f64,
    /// `None` selects the desk-scale layout for the scene's frame count.
    pub deform: Option<DeformConfig>,
    pub material: MaterialConfig,
    pub rates: LearningRates,
    pub densify: DensifySchedule,
    pub init_gaussians: usize,
    pub max_gaussians: usize,
    /// Share of visible frames inside the motion mask that marks a particle dynamic.
    pub dynamic_fraction: f64,
    pub log_every: usize,
    /// 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            scene: String::new(),
            out: String::new(),
            seed: 42,
            image_size: [64, 64],
            iterations: 2000,
            stage_switch: 0.6,
            weights: LossWeights::default(),
            ablation: Ablation::None,
            top_k: 8,
            cmr_samples: 4096,
            cmr_block: 1024,
            density: 1.0,
            deform: None,
            material: MaterialConfig::default(),
            rates: LearningRates::default(),
            densify: DensifySchedule::default(),
            init_gaussians: 200,
            max_gaussians: 300,
            dynamic_fraction: 0.3,
            log_every: 1,
            checkpoint_every: 0,
        }
    }
}

impl RunConfig {
    /// Every problem with the configuration, not just the first.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut need = |ok: bool, msg: String| {
            if !ok {
                out.push(msg);
            }
        };
        need(self.iterations > 0, "iterations must be at least 1".into());
        need(
            (0.0..=1.0).contains(&self.stage_switch),
            format!("stage_switch {} outside [0, 1]", self.stage_switch),
        );
        if let Err(e) = self.weights.validate() {
            out.push(e);
        }
        let mut need = |ok: bool, msg: String| {
            if !ok {
                out.push(msg);
            }
        };
        need(self.image_size[0] > 0 && self.image_size[1] > 0, "image_size must be non-zero".into());
        need(self.top_k > 0, "top_k must be at least 1".into());
        need(self.cmr_samples > 0, "cmr_samples must be at least 1".into());
        need(self.cmr_block > 0, "cmr_block must be at least 1".into());
        need(self.density.is_finite() && self.density > 0.0, format!("density {} must be positive", self.density));
        need(self.init_gaussians > 0, "init_gaussians must be at least 1".into());
        need(
            self.max_gaussians >= self.init_gaussians,
            format!("max_gaussians {} below init_gaussians {}", self.max_gaussians, self.init_gaussians),
        );
        need(
            (0.0..=1.0).contains(&self.dynamic_fraction),
            format!("dynamic_fraction {} outside [0, 1]", self.dynamic_fraction),
        );
        need(self.log_every > 0, "log_every must be at least 1".into());
        need(self.densify.every > 0, "densify.every must be at least 1".into());
        let r = &self.rates;
        for (name, v) in [
            ("position", r.position),
            ("rotation", r.rotation),
            ("scale", r.scale),
            ("color", r.color),
            ("opacity", r.opacity),
            ("decoder", r.decoder),
            ("grid_multiplier", r.grid_multiplier),
        ] {
            need(v.is_finite() && v >= 0.0, format!("rates.{name} must be finite and non-negative"));
        }
        need(r.decay_fraction > 0.0, "rates.decay_fraction must be positive".into());
        if let Some(d) = &self.deform {
            if let Err(e) = d.validate() {
                out.push(format!("deform: {e}"));
            }
        }
        if let Err(e) = self.material.validate() {
            out.push(e);
        }
        out
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(TrainError::Config(p))
        }
    }

    /// Loss weights after the ablation is applied.
    pub fn effective_weights(&self) -> LossWeights {
        self.ablation.apply(&self.weights)
    }

    pub fn switch_iteration(&self) -> usize {
        (self.stage_switch * self.iterations as f64).round() as usize
    }
}

/// Frames, cameras and supervision a run trains against.
#[derive(Clone, Debug)]
pub struct TrainData<T> {
    pub images: Vec<Image<T>>,
    pub cameras: Vec<Camera<T>>,
    pub depths: Vec<Vec<T>>,
    pub times: Vec<f64>,
    pub flow_b: Vec<FlowField<T>>,
    pub flow_f: Vec<FlowField<T>>,
    pub masks: Vec<MotionMask>,
}

impl TrainData<f64> {
    pub fn from_scene(scene: &SyntheticScene) -> Self {
        Self {
            images: scene.images.clone(),
            cameras: scene.cameras.clone(),
            depths: scene.depths.iter().map(|d| d.data.clone()).collect(),
            times: (0..scene.frames()).map(|f| scene.spec.time(f)).collect(),
            flow_b: scene.flow_b.clone(),
            flow_f: scene.flow_f.clone(),
            masks: scene.masks.clone(),
        }
    }
}

fn cast_flow<T: Real, U: Real>(f: &FlowField<T>) -> FlowField<U> {
    FlowField {
        width: f.width,
        height: f.height,
        data: f.data.iter().map(|v| [U::of(v[0].as_f64()), U::of(v[1].as_f64())]).collect(),
        valid: f.valid.clone(),
    }
}

impl<T: Real> TrainData<T> {
    pub fn cast<U: Real>(&self) -> TrainData<U> {
        TrainData {
            images: self.images.iter().map(Image::cast).collect(),
            cameras: self.cameras.iter().map(Camera::cast).collect(),
            depths: self.depths.iter().map(|d| d.iter().map(|v| U::of(v.as_f64())).collect()).collect(),
            times: self.times.clone(),
            flow_b: self.flow_b.iter().map(cast_flow).collect(),
            flow_f: self.flow_f.iter().map(cast_flow).collect(),
            masks: self.masks.clone(),
        }
    }

    pub fn frames(&self) -> usize {
        self.images.len()
    }

    pub fn size(&self) -> (usize, usize) {
        self.images.first().map_or((0, 0), |i| (i.width, i.height))
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let n = self.frames();
        let bad = |m: String| Err(TrainError::Data(m));
        if n < 2 {
            return bad(format!("need at least 2 frames, got {n}"));
        }
        if self.cameras.len() != n || self.depths.len() != n || self.times.len() != n || self.masks.len() != n {
            return bad("frames, cameras, depths, times and masks must have equal counts".into());
        }
        if self.flow_b.len() != n - 1 || self.flow_f.len() != n - 1 {
            return bad(format!("expected {} backward and forward flows", n - 1));
        }
        let (w, h) = self.size();
        for f in 0..n {
            let c = &self.cameras[f];
            if self.images[f].width != w || self.images[f].height != h || c.width != w || c.height != h {
                return bad(format!("frame {f} size differs from {w}x{h}"));
            }
            if self.depths[f].len() != w * h || self.masks[f].width != w || self.masks[f].height != h {
                return bad(format!("frame {f} depth or mask size differs from {w}x{h}"));
            }
        }
        if self.times.windows(2).any(|p| !(p[1] > p[0])) || self.times.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return bad("frame times must increase within [0, 1]".into());
        }
        Ok(())
    }

    /// Camera-compensated object motion on `I_f` for each consecutive pair:
    /// backward decomposition on `I_{f+1}` warped onto the `I_f` grid.
    pub fn motion_targets(&self) -> Result<Vec<FlowField<T>>, FlowError> {
        (0..self.frames() - 1)
            .map(|f| {
                let (_, motion) =
                    decompose_backward(&self.flow_b[f], &self.depths[f + 1], &self.cameras[f], &self.cameras[f + 1])?;
                warp_flow_forward(&motion, &self.flow_f[f])
            })
            .collect()
    }
}

/// One logged row of the metrics stream.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepMetrics {
    pub iter: usize,
    pub loss_total: f64,
    pub loss_renders: f64,
    pub loss_cmr: f64,
    pub loss_lpfm: f64,
    pub psnr: f64,
    pub num_gaussians: usize,
}

impl StepMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.iter, self.loss_total, self.loss_renders, self.loss_cmr, self.loss_lpfm, self.psnr, self.num_gaussians
        )
    }
}

/// Forward-only deformed pose of every particle.
#[derive(Clone, Debug)]
pub struct PosedCloud<T> {
    pub mu: Vec<Vec3<T>>,
    pub q: Vec<[T; 4]>,
    pub log_scale: Vec<Vec3<T>>,
}

fn rows3<T: Real>(t: &Tensor<T>) -> Vec<[T; 3]> {
    (0..t.rows()).map(|r| [t.at(r, 0), t.at(r, 1), t.at(r, 2)]).collect()
}

fn rows4<T: Real>(t: &Tensor<T>) -> Vec<[T; 4]> {
    (0..t.rows()).map(|r| [t.at(r, 0), t.at(r, 1), t.at(r, 2), t.at(r, 3)]).collect()
}

pub struct Trainer<T: Real> {
    /// Resolved configuration (deformation layout filled in).
    pub config: RunConfig,
    pub weights: LossWeights,
    pub cloud: GaussianCloud<T>,
    pub bounds: SceneBounds,
    pub deform: DeformationField<T>,
    pub material: MaterialField<T>,
    pub cloud_opt: Adam<T>,
    pub deform_opt: Adam<T>,
    pub material_opt: Adam<T>,
    pub stats: DensifyStats,
    /// Completed steps.
    pub iteration: usize,
    data: TrainData<T>,
    targets: Vec<FlowField<T>>,
    settings: RenderSettings,
}

fn param_shapes<T: Real>(p: &ParamSet<T>) -> Vec<Vec<usize>> {
    p.iter().map(|(_, t)| t.shape().to_vec()).collect()
}

fn adam_for<T: Real>(p: &ParamSet<T>) -> Adam<T> {
    let shapes = param_shapes(p);
    Adam::new(shapes.iter().map(|s| s.as_slice()))
}

fn cloud_adam<T: Real>(ct: &CloudTensors<T>) -> Adam<T> {
    Adam::new([ct.mu.shape(), ct.q.shape(), ct.log_scale.shape(), ct.sh.shape(), ct.opacity.shape()])
}

fn cloud_slots<T: Real>(ct: &mut CloudTensors<T>) -> [&mut Tensor<T>; 5] {
    [&mut ct.mu, &mut ct.q, &mut ct.log_scale, &mut ct.sh, &mut ct.opacity]
}

/// Stream of the per-step generator; stream 0 is used for initialization.
fn step_rng(seed: u64, iteration: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iteration as u64 + 1);
    rng
}

/// Particles backprojected from random covered pixels of the first frame.
fn init_cloud<T: Real>(data: &TrainData<T>, count: usize, rng: &mut impl Rng) -> Result<GaussianCloud<T>, TrainError> {
    let cam = &data.cameras[0];
    let (w, _) = data.size();
    let covered: Vec<usize> = data.depths[0]
        .iter()
        .enumerate()
        .filter(|(_, d)| d.as_f64() > crate::render::NEAR_PLANE)
        .map(|(i, _)| i)
        .collect();
    if covered.is_empty() {
        return Err(TrainError::Data("first frame has no valid depth to initialize from".into()));
    }
    let mut picks = sample(rng, covered.len(), count.min(covered.len())).into_vec();
    picks.sort_unstable();
    let mut cloud = GaussianCloud::new();
    let focal = cam.fx.as_f64();
    for k in picks {
        let p = covered[k];
        let d = data.depths[0][p];
        let px = [T::of((p % w) as f64), T::of((p / w) as f64)];
        let x = cam.to_world(&cam.unproject(px, d));
        // About one and a half pixels across at the sampled depth.
        let scale = T::of(1.5 * d.as_f64() / focal);
        let rgb = data.images[0].pixel(p % w, p / w);
        cloud.insert(GaussianParticle::new(x, scale, rgb, T::of(0.7), 0));
    }
    Ok(cloud)
}

impl<T: Real> Trainer<T> {
    pub fn new(mut config: RunConfig, data: TrainData<T>) -> Result<Self, TrainError> {
        config.validate()?;
        data.validate()?;
        let (w, h) = data.size();
        if [w, h] != config.image_size {
            return Err(TrainError::Config(vec![format!(
                "image_size {:?} does not match the scene ({w}x{h})",
                config.image_size
            )]));
        }
        let deform_cfg = config.deform.clone().unwrap_or_else(|| DeformConfig::desk(data.frames()));
        config.deform = Some(deform_cfg.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let cloud = init_cloud(&data, config.init_gaussians, &mut rng)?;
        let centers: Vec<[f64; 3]> = cloud.particles.iter().map(|p| p.mu.map(|v| v.as_f64())).collect();
        let bounds = SceneBounds::around(&centers, 0.5);
        let deform = DeformationField::new(deform_cfg, &mut rng)?;
        let material = MaterialField::new(config.material.clone(), cloud.next_id as usize, &mut rng)?;
        let ct = CloudTensors::from_cloud(&cloud);
        let targets = data.motion_targets()?;
        Ok(Self {
            weights: config.effective_weights(),
            cloud_opt: cloud_adam(&ct),
            deform_opt: adam_for(&deform.params),
            material_opt: adam_for(&material.params),
            stats: DensifyStats::new(cloud.len()),
            settings: RenderSettings {
                top_k: config.top_k,
                ..RenderSettings::default()
            },
            config,
            cloud,
            bounds,
            deform,
            material,
            iteration: 0,
            data,
            targets,
        })
    }

    pub fn data(&self) -> &TrainData<T> {
        &self.data
    }

    /// Object-motion targets used for flow matching.
    pub fn motion_targets(&self) -> &[FlowField<T>] {
        &self.targets
    }

    pub fn domain(&self) -> Domain {
        Domain::new(&self.bounds, 0.0, 1.0)
    }

    pub fn in_stage2(&self) -> bool {
        self.iteration >= self.config.switch_iteration()
    }

    fn scene_extent(&self) -> f64 {
        let e = self.bounds.extent;
        (e[0] * e[0] + e[1] * e[1] + e[2] * e[2]).sqrt() / 2.0
    }

    fn dynamic_mask(&self) -> Vec<bool> {
        self.cloud.particles.iter().map(|p| p.dynamic).collect()
    }

    /// Deformed poses at time `t`; `respect_static` keeps static particles canonical.
    pub fn posed(&self, t: f64, respect_static: bool) -> Result<PosedCloud<T>, AdError> {
        let ct = CloudTensors::from_cloud(&self.cloud);
        if self.cloud.is_empty() {
            return Ok(PosedCloud {
                mu: Vec::new(),
                q: Vec::new(),
                log_scale: Vec::new(),
            });
        }
        let mut tape = Tape::new();
        let vars = self.deform.params.bind_frozen(&mut tape);
        let mu = tape.constant(ct.mu);
        let q = tape.constant(ct.q);
        let s = tape.constant(ct.log_scale);
        let mask = self.dynamic_mask();
        let pose = self
            .deform
            .deform(&mut tape, &vars, mu, q, s, t, &self.bounds, respect_static.then_some(&mask[..]))?;
        Ok(PosedCloud {
            mu: rows3(tape.value(pose.mu)),
            q: rows4(tape.value(pose.q)),
            log_scale: rows3(tape.value(pose.s)),
        })
    }

    /// Normalized material-field query points for world centers at time `t`.
    fn material_points(&self, centers: &[Vec3<T>], t: f64) -> Tensor<T> {
        let domain = self.domain();
        let mut data = Vec::with_capacity(centers.len() * 4);
        for c in centers {
            let u = domain.to_unit(&[c[0].as_f64(), c[1].as_f64(), c[2].as_f64(), t]);
            data.extend(u.iter().map(|v| T::of(v.clamp(0.0, 1.0))));
        }
        Tensor::new(vec![centers.len(), 4], data).expect("query shape")
    }

    fn residual_samples(&self, centers: &[Vec3<T>], t: f64) -> Result<ResidualSamples<T>, PhysicsError> {
        ResidualSamples::new(self.material_points(centers, t), self.cloud.ids())
    }

    /// Marks particles dynamic from the ground-truth masks and bakes the
    /// current pose of the static ones into canonical space.
    fn partition(&mut self) -> Result<(), TrainError> {
        let frames = self.data.frames();
        let mut centers = Vec::with_capacity(frames);
        for f in 0..frames {
            centers.push(self.posed(self.data.times[f], false)?.mu);
        }
        let dynamic = partition_dynamic(&centers, &self.data.masks, &self.data.cameras, self.config.dynamic_fraction);
        let mid = self.posed(0.5, false)?;
        for (i, p) in self.cloud.particles.iter_mut().enumerate() {
            p.dynamic = dynamic[i];
            if !p.dynamic {
                p.mu = mid.mu[i];
                p.q = mid.q[i];
                p.log_scale = mid.log_scale[i];
            }
        }
        log::info!(
            "stage 2 at iteration {}: {} of {} particles dynamic",
            self.iteration,
            self.cloud.dynamic_count(),
            self.cloud.len()
        );
        Ok(())
    }

    fn rate(&self, base: f64) -> f64 {
        let every = self.config.rates.decay_fraction * self.config.iterations as f64;
        exp_decay(base, self.iteration, every)
    }

    /// One optimization step.
    pub fn step(&mut self) -> Result<StepMetrics, TrainError> {
        let i = self.iteration;
        let switch = self.config.switch_iteration();
        if i == switch {
            self.partition()?;
        }
        let stage2 = i >= switch;
        let mut rng = step_rng(self.config.seed, i);
        let frames = self.data.frames();
        let f = rng.gen_range(0..frames);
        let t = self.data.times[f];
        let cam = self.data.cameras[f].clone();
        let w = self.weights;
        let dynamic = self.dynamic_mask();
        let mask = stage2.then_some(&dynamic[..]);

        let ct = CloudTensors::from_cloud(&self.cloud);
        let n = self.cloud.len();
        let ids = self.cloud.ids();
        let mut tape = Tape::new();
        let cv = [
            tape.leaf(ct.mu.clone()),
            tape.leaf(ct.q.clone()),
            tape.leaf(ct.log_scale.clone()),
            tape.leaf(ct.sh.clone()),
            tape.leaf(ct.opacity.clone()),
        ];
        let dv = self.deform.params.bind(&mut tape);
        let pose = self.deform.deform(&mut tape, &dv, cv[0], cv[1], cv[2], t, &self.bounds, mask)?;
        let frame = render_pose(&mut tape, &cam, pose.mu, pose.q, pose.s, cv[3], cv[4], &ids, &self.settings)?;
        let rgb = rgb_of(&mut tape, frame.image)?;
        let target = &self.data.images[f];
        let renders = renders_loss(&mut tape, rgb, target, w.lambda_c).map_err(|source| TrainError::Loss {
            iteration: i + 1,
            source,
        })?;
        let rendered = Image {
            width: target.width,
            height: target.height,
            data: tape.value(rgb).data().to_vec(),
        };
        let psnr = losses::psnr(&rendered, target).map_err(|source| TrainError::Loss { iteration: i + 1, source })?;

        let mut mv: Option<Vec<Var>> = None;
        let mut lpfm = None;
        if stage2 && w.lambda_lpfm > 0.0 && f + 1 < frames {
            let vars = self.material.params.bind(&mut tape);
            let canon = [cv[0], cv[1], cv[2]];
            lpfm = self.flow_matching(&mut tape, &vars, &dv, canon, f, &cam, pose.mu, frame.proj, &frame.layout, &ids)?;
            mv = Some(vars);
        }
        let loss = total_loss(&mut tape, renders.total, None, lpfm, &w)
            .map_err(|source| TrainError::Loss { iteration: i + 1, source })?;
        let grads = tape.backward(loss)?;

        // Screen-space positional gradients drive densification.
        if !stage2 {
            let pg = grads.or_zeros(frame.proj, tape.shape(frame.proj));
            let proj = tape.value(frame.proj);
            let norms: Vec<f64> = (0..n).map(|r| pg.at(r, 0).as_f64().hypot(pg.at(r, 1).as_f64())).collect();
            let visible: Vec<bool> = (0..n).map(|r| Projected::from_row(proj.row(r)).visible()).collect();
            self.stats.record(&norms, &visible);
        }

        let cmr = if w.lambda_cmr > 0.0 && n > 0 {
            let centers = rows3(tape.value(pose.mu));
            let samples = self.residual_samples(&centers, t)?;
            let fraction = self.config.cmr_samples.min(n) as f64 / n as f64;
            let opts = ResidualOptions {
                density: self.config.density,
                linearized: false,
            };
            Some(block_sampled_cmr(
                &self.material,
                &samples,
                &self.domain(),
                opts,
                self.config.cmr_block,
                fraction,
                &mut rng,
            )?)
        } else {
            None
        };

        let renders_value = tape.value(renders.total).item().as_f64();
        let lpfm_value = lpfm.map(|v| tape.value(v).item().as_f64());
        let cmr_value = cmr.as_ref().map(|c| c.loss.as_f64());
        let loss_total = w
            .combine(renders_value, cmr_value, lpfm_value)
            .map_err(|source| TrainError::Loss { iteration: i + 1, source })?;

        // Updates.
        let rates = self.config.rates.clone();
        let pos_rate = self.rate(rates.position * self.scene_extent());
        let cloud_rates = [pos_rate, rates.rotation, rates.scale, rates.color, rates.opacity];
        let frozen: Vec<bool> = dynamic.iter().map(|d| !d).collect();
        let mut ct = ct;
        for (k, (param, var)) in cloud_slots(&mut ct).into_iter().zip(cv).enumerate() {
            let freeze = (stage2 && k < 3).then_some(&frozen[..]);
            self.cloud_opt.step(k, param, grads.get(var), cloud_rates[k], freeze);
        }
        ct.write_back(&mut self.cloud);

        let decoder = self.rate(rates.decoder);
        let grid = decoder * rates.grid_multiplier;
        for (k, var) in dv.iter().enumerate() {
            let r = if DeformationField::<T>::is_grid_slot(k) { grid } else { decoder };
            self.deform_opt.step(k, self.deform.params.get_mut(k), grads.get(*var), r, None);
        }
        if mv.is_some() || cmr.is_some() {
            for k in 0..self.material.params.len() {
                let mut g = match &mv {
                    Some(vars) => grads.get(vars[k]).cloned(),
                    None => None,
                };
                if let Some(c) = &cmr {
                    let scaled = c.grads[k].map(|v| v * T::of(w.lambda_cmr));
                    match &mut g {
                        Some(acc) => acc.add_assign(&scaled),
                        None => g = Some(scaled),
                    }
                }
                let r = if MaterialField::<T>::is_grid_slot(k) { grid } else { decoder };
                self.material_opt.step(k, self.material.params.get_mut(k), g.as_ref(), r, None);
            }
        }

        self.iteration += 1;
        if !stage2 {
            self.maybe_densify(&mut rng);
        }
        Ok(StepMetrics {
            iter: self.iteration,
            loss_total,
            loss_renders: renders_value,
            loss_cmr: cmr_value.unwrap_or(0.0),
            loss_lpfm: lpfm_value.unwrap_or(0.0),
            psnr,
            num_gaussians: self.cloud.len(),
        })
    }

    /// `λ_g |f_g − f_gt|₁ + λ_v |f_v − f_gt|₁` averaged over masked pixels of
    /// frame `f`; `None` when no pixel is supervised.
    #[allow(clippy::too_many_arguments)]
    fn flow_matching(
        &self,
        tape: &mut Tape<T>,
        mvars: &[Var],
        dvars: &[Var],
        canon: [Var; 3],
        f: usize,
        cam: &Camera<T>,
        mu_t: Var,
        proj_t: Var,
        layout: &crate::render::Layout<T>,
        ids: &[u64],
    ) -> Result<Option<Var>, TrainError> {
        let gt = &self.targets[f];
        let mask = &self.data.masks[f];
        let lists = layout.weights();
        let mut pixels = Vec::new();
        let mut truth = Vec::new();
        for (p, list) in lists.iter().enumerate() {
            if !(mask.data[p] && gt.valid[p]) {
                continue;
            }
            pixels.push(PixelTerms {
                pixel: [(p % gt.width) as f64, (p / gt.width) as f64],
                entries: list.iter().take(self.config.top_k).map(|&(r, wt)| (r, wt.as_f64())).collect(),
            });
            truth.push(gt.data[p]);
        }
        if pixels.is_empty() {
            return Ok(None);
        }
        let dynamic = self.dynamic_mask();
        let (t0, t1) = (self.data.times[f], self.data.times[f + 1]);
        let cv_mu = tape.value(mu_t).clone();
        // Pose at t+1 from the same canonical leaves, seen by camera f.
        let [mu, q, s] = canon;
        let next = self.deform.deform(tape, dvars, mu, q, s, t1, &self.bounds, Some(&dynamic))?;
        let proj_n = project(tape, cam, next.mu, next.q, next.s)?;
        let target_g = tape.slice_cols(proj_n, 0, 2)?;
        let flow_g = lagrangian_flow(tape, pixels.clone(), proj_t, proj_n, target_g)?;

        let centers = rows3(&cv_mu);
        let points = self.material_points(&centers, t0);
        let feats = self.material.featurize(tape, mvars, &points, ids, false)?;
        let (v, _) = self.material.predict(tape, mvars, &feats)?;
        let vpx = project_velocity(tape, cam, &centers, v.value)?;
        let step = tape.scale(vpx, t1 - t0)?;
        let mean_t = tape.slice_cols(proj_t, 0, 2)?;
        let target_v = tape.add(mean_t, step)?;
        let flow_v = lagrangian_flow(tape, pixels, proj_t, proj_n, target_v)?;

        let gt = tape.constant(Tensor::from_rows(&truth));
        let p = truth.len() as f64;
        let w = self.weights;
        let mut terms = Vec::with_capacity(2);
        for (flow, lambda) in [(flow_g, w.lambda_g), (flow_v, w.lambda_v)] {
            let d = tape.sub(flow, gt)?;
            let a = tape.abs(d)?;
            let s = tape.sum(a)?;
            terms.push(tape.scale(s, lambda / p)?);
        }
        Ok(Some(tape.add(terms[0], terms[1])?))
    }

    fn maybe_densify(&mut self, rng: &mut impl Rng) {
        let i = self.iteration;
        let sched = &self.config.densify;
        if i < sched.from || !i.is_multiple_of(sched.every) || i >= self.config.switch_iteration() {
            return;
        }
        let mut params = sched.params.clone();
        params.max_particles = self.config.max_gaussians;
        let extent = self.scene_extent();
        let (grown, o1) = densify(&self.cloud, &self.stats, &params, extent, rng);
        let (pruned, o2) = prune_by_scale(&grown, sched.prune_scale, extent);
        let origins: RowOrigins = o2.iter().map(|o| o.and_then(|k| o1[k])).collect();
        log::debug!("densify at {i}: {} -> {} particles", self.cloud.len(), pruned.len());
        self.cloud = pruned;
        for k in 0..CLOUD_SLOTS.len() {
            self.cloud_opt.remap_rows(k, &origins);
        }
        // Statistics restart after every densification.
        self.stats = DensifyStats::new(self.cloud.len());
    }
}

fn named<'a, T: Real>(prefix: &'a str, p: &'a ParamSet<T>) -> impl Iterator<Item = (String, Tensor<f64>)> + 'a {
    p.iter().map(move |(n, t)| (format!("{prefix}.{n}"), t.cast()))
}

fn named_slots<'a, T: Real>(
    prefix: &'a str,
    names: impl Iterator<Item = String> + 'a,
    opt: &'a Adam<T>,
) -> impl Iterator<Item = (String, AdamSlot<f64>)> + 'a {
    names.zip(&opt.slots).map(move |(n, s)| {
        (
            format!("{prefix}.{n}"),
            AdamSlot {
                m: s.m.cast(),
                v: s.v.cast(),
                step: s.step,
            },
        )
    })
}

fn restore_slot<T: Real>(ck: &Checkpoint, name: &str, shape: Option<&[usize]>) -> Result<AdamSlot<T>, TrainError> {
    let s = ck
        .slot(name)
        .ok_or_else(|| TrainError::Checkpoint(format!("missing optimizer state `{name}`")))?;
    if let Some(shape) = shape {
        if s.m.shape() != shape || s.v.shape() != shape {
            return Err(TrainError::Checkpoint(format!("optimizer state `{name}` has shape {:?}", s.m.shape())));
        }
    }
    Ok(AdamSlot {
        m: s.m.cast(),
        v: s.v.cast(),
        step: s.step,
    })
}

fn restore_params<T: Real>(ck: &Checkpoint, prefix: &str, params: &mut ParamSet<T>, opt: &mut Adam<T>) -> Result<(), TrainError> {
    for k in 0..params.len() {
        let name = format!("{prefix}.{}", params.name(k));
        let t = ck
            .tensor(&name)
            .ok_or_else(|| TrainError::Checkpoint(format!("missing tensor `{name}`")))?;
        if t.shape() != params.get(k).shape() {
            return Err(TrainError::Checkpoint(format!(
                "tensor `{name}` has shape {:?}, configuration expects {:?}",
                t.shape(),
                params.get(k).shape()
            )));
        }
        *params.get_mut(k) = t.cast();
        opt.slots[k] = restore_slot(ck, &name, Some(t.shape()))?;
    }
    Ok(())
}

/// Mean of `‖r‖` and the number of samples.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ResidualReport {
    pub mean: f64,
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub psnr: f64,
    pub ssim: f64,
    /// Mean endpoint error of Gaussian flow against object motion on masked pixels.
    pub flow_epe: Option<f64>,
    pub flow_pixels: usize,
    pub residual_mean: f64,
    pub residual_samples: usize,
    pub frames: usize,
    pub num_gaussians: usize,
}

/// Gaussian and velocity flow of one frame pair, both seen by one camera.
pub struct FlowPair<T> {
    pub render: RenderOutput<T>,
    pub flow_g: FlowField<T>,
    pub flow_v: FlowField<T>,
}

impl<T: Real> Trainer<T> {
    pub fn checkpoint(&self) -> Result<Checkpoint, TrainError> {
        let config = serde_json::to_string_pretty(&self.config).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
        let ct = CloudTensors::from_cloud(&self.cloud);
        let cloud_tensors = [&ct.mu, &ct.q, &ct.log_scale, &ct.sh, &ct.opacity];
        let mut tensors: Vec<(String, Tensor<f64>)> = CLOUD_SLOTS
            .iter()
            .zip(cloud_tensors)
            .map(|(n, t)| (format!("cloud.{n}"), t.cast()))
            .collect();
        tensors.extend(named("deform", &self.deform.params));
        tensors.extend(named("material", &self.material.params));
        let b = &self.bounds;
        tensors.push((
            "bounds".into(),
            Tensor::from_rows(&[b.lo, b.extent]),
        ));
        let n = self.stats.grad_sum.len();
        tensors.push(("densify.grad_sum".into(), Tensor::new(vec![n], self.stats.grad_sum.clone())?));
        tensors.push((
            "densify.count".into(),
            Tensor::new(vec![n], self.stats.count.iter().map(|&c| c as f64).collect())?,
        ));
        let mut optimizer: Vec<(String, AdamSlot<f64>)> =
            named_slots("cloud", CLOUD_SLOTS.iter().map(|s| s.to_string()), &self.cloud_opt).collect();
        let dn: Vec<String> = self.deform.params.iter().map(|(n, _)| n.to_string()).collect();
        optimizer.extend(named_slots("deform", dn.into_iter(), &self.deform_opt));
        let mn: Vec<String> = self.material.params.iter().map(|(n, _)| n.to_string()).collect();
        optimizer.extend(named_slots("material", mn.into_iter(), &self.material_opt));
        Ok(Checkpoint {
            config,
            iteration: self.iteration as u64,
            next_id: self.cloud.next_id,
            particles: self
                .cloud
                .particles
                .iter()
                .map(|p| ParticleRecord {
                    id: p.id,
                    dynamic: p.dynamic,
                })
                .collect(),
            tensors,
            optimizer,
        })
    }

    /// Rebuilds a trainer from a checkpoint; `data` must be the scene it was trained on.
    pub fn from_checkpoint(ck: &Checkpoint, data: TrainData<T>) -> Result<Self, TrainError> {
        let config: RunConfig =
            serde_json::from_str(&ck.config).map_err(|e| TrainError::Checkpoint(format!("embedded config: {e}")))?;
        let mut tr = Self::new(config, data)?;
        let n = ck.particles.len();
        let get = |name: &str, cols: usize| -> Result<&Tensor<f64>, TrainError> {
            let t = ck
                .tensor(name)
                .ok_or_else(|| TrainError::Checkpoint(format!("missing tensor `{name}`")))?;
            let ok = if cols == 0 { t.shape() == [n] } else { t.shape() == [n, cols] };
            if !ok {
                return Err(TrainError::Checkpoint(format!("tensor `{name}` has shape {:?} for {n} particles", t.shape())));
            }
            Ok(t)
        };
        let (mu, q, s, sh, op) = (
            get("cloud.mu", 3)?,
            get("cloud.q", 4)?,
            get("cloud.log_scale", 3)?,
            get("cloud.sh", crate::scene::SH_COEFFS)?,
            get("cloud.opacity", 1)?,
        );
        let t = |v: f64| T::of(v);
        tr.cloud = GaussianCloud {
            particles: ck
                .particles
                .iter()
                .enumerate()
                .map(|(i, rec)| GaussianParticle {
                    mu: std::array::from_fn(|c| t(mu.at(i, c))),
                    q: std::array::from_fn(|c| t(q.at(i, c))),
                    log_scale: std::array::from_fn(|c| t(s.at(i, c))),
                    sh: std::array::from_fn(|c| t(sh.at(i, c))),
                    opacity: t(op.at(i, 0)),
                    id: rec.id,
                    dynamic: rec.dynamic,
                })
                .collect(),
            next_id: ck.next_id,
        };
        for (k, name) in CLOUD_SLOTS.iter().enumerate() {
            let cols = [3, 4, 3, crate::scene::SH_COEFFS, 1][k];
            tr.cloud_opt.slots[k] = restore_slot(ck, &format!("cloud.{name}"), Some(&[n, cols]))?;
        }
        restore_params(ck, "deform", &mut tr.deform.params, &mut tr.deform_opt)?;
        restore_params(ck, "material", &mut tr.material.params, &mut tr.material_opt)?;
        let b = ck
            .tensor("bounds")
            .filter(|b| b.shape() == [2, 3])
            .ok_or_else(|| TrainError::Checkpoint("missing or malformed `bounds`".into()))?;
        tr.bounds = SceneBounds {
            lo: [b.at(0, 0), b.at(0, 1), b.at(0, 2)],
            extent: [b.at(1, 0), b.at(1, 1), b.at(1, 2)],
        };
        tr.stats = DensifyStats {
            grad_sum: get("densify.grad_sum", 0)?.data().to_vec(),
            count: get("densify.count", 0)?.data().iter().map(|&c| c as u32).collect(),
        };
        tr.iteration = ck.iteration as usize;
        Ok(tr)
    }

    /// Forward render at time `t` through the learned deformation.
    pub fn render_view(&self, cam: &Camera<T>, t: f64) -> Result<RenderOutput<T>, AdError> {
        crate::render::render_cloud(&self.cloud, Some((&self.deform, &self.bounds)), cam, t, &self.settings)
    }

    /// Velocity and stress of every particle at its deformed position at `t`.
    pub fn particle_state(&self, t: f64) -> Result<Vec<crate::material::VelocityStress<T>>, AdError> {
        let pose = self.posed(t, true)?;
        self.material.evaluate(&self.material_points(&pose.mu, t), &self.cloud.ids())
    }

    /// Gaussian and velocity flow from `t0` to `t1` seen by `cam`.
    pub fn flow_pair(&self, cam: &Camera<T>, t0: f64, t1: f64) -> Result<FlowPair<T>, AdError> {
        let render = self.render_view(cam, t0)?;
        let now = self.posed(t0, true)?;
        let next = self.posed(t1, true)?;
        let projected: Vec<Projected<T>> = (0..next.mu.len())
            .map(|i| project_one(cam, &next.mu[i], &next.q[i], &next.log_scale[i]))
            .collect();
        let flow_g = gaussian_flow(&render, &projected);
        let state = self.material.evaluate(&self.material_points(&now.mu, t0), &self.cloud.ids())?;
        let vpx: Vec<[T; 2]> = now
            .mu
            .iter()
            .zip(&state)
            .map(|(x, (v, _))| crate::flow::project_velocity_at(cam, x, v))
            .collect();
        let flow_v = velocity_flow(&render, &projected, &vpx, T::of(t1 - t0));
        Ok(FlowPair { render, flow_g, flow_v })
    }

    /// Mean momentum-residual norm over all particles at every frame time.
    pub fn residual(&self) -> Result<ResidualReport, TrainError> {
        let domain = self.domain();
        let opts = ResidualOptions {
            density: self.config.density,
            linearized: false,
        };
        let mut sum = 0.0;
        let mut count = 0usize;
        for &t in &self.data.times {
            let pose = self.posed(t, true)?;
            let samples = self.residual_samples(&pose.mu, t)?;
            let all: Vec<usize> = (0..samples.len()).collect();
            for chunk in all.chunks(self.config.cmr_block) {
                let block = samples.subset(chunk);
                let mut tape = Tape::new();
                let vars = self.material.params.bind_frozen(&mut tape);
                let (v, s) = self.material.velocity_stress(&mut tape, &vars, &block.points, &block.ids)?;
                let r = momentum_residual(&mut tape, &v, &s, &domain, opts)?;
                let r = tape.value(r.r);
                for row in 0..r.rows() {
                    sum += r.row(row).iter().map(|x| x.as_f64().powi(2)).sum::<f64>().sqrt();
                }
                count += r.rows();
            }
        }
        Ok(ResidualReport {
            mean: if count == 0 { 0.0 } else { sum / count as f64 },
            samples: count,
        })
    }

    /// Photometric, flow and physics metrics over the training views.
    ///
    /// `truth[f]` is the object motion from frame `f` to `f + 1` on `I_f`;
    /// without it the camera-compensated training targets are used.
    pub fn evaluate(&self, truth: Option<&[FlowField<f64>]>) -> Result<EvalReport, TrainError> {
        let frames = self.data.frames();
        let (mut psnr, mut ssim) = (0.0, 0.0);
        let mut epe = 0.0;
        let mut pixels = 0usize;
        for f in 0..frames {
            let cam = &self.data.cameras[f];
            let t = self.data.times[f];
            let render = if f + 1 < frames {
                let pair = self.flow_pair(cam, t, self.data.times[f + 1])?;
                let mask = &self.data.masks[f];
                for p in 0..mask.data.len() {
                    let gt = match truth {
                        Some(tr) => tr[f].valid[p].then(|| tr[f].data[p]),
                        None => self.targets[f].valid[p].then(|| self.targets[f].data[p].map(|v| v.as_f64())),
                    };
                    let (Some(gt), true, true) = (gt, mask.data[p], pair.flow_g.valid[p]) else { continue };
                    let g = pair.flow_g.data[p];
                    epe += (g[0].as_f64() - gt[0]).hypot(g[1].as_f64() - gt[1]);
                    pixels += 1;
                }
                pair.render
            } else {
                self.render_view(cam, t)?
            };
            let img = Image::from_pixels(render.width, render.height, &render.color);
            let target = &self.data.images[f];
            let err = |source| TrainError::Loss { iteration: self.iteration, source };
            psnr += losses::psnr(&img, target).map_err(err)?;
            ssim += losses::ssim_value(&img, target).map_err(err)?;
        }
        let res = self.residual()?;
        Ok(EvalReport {
            psnr: psnr / frames as f64,
            ssim: ssim / frames as f64,
            flow_epe: (pixels > 0).then(|| epe / pixels as f64),
            flow_pixels: pixels,
            residual_mean: res.mean,
            residual_samples: res.samples,
            frames,
            num_gaussians: self.cloud.len(),
        })
    }
}

pub fn checkpoint_path(out: &Path, iteration: usize) -> PathBuf {
    out.join(format!("checkpoint_{iteration:06}.ckpt"))
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<(), TrainError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut w, ck)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, TrainError> {
    Ok(read_checkpoint(&mut BufReader::new(File::open(path)?))?)
}

#[derive(Clone, Debug, Default)]
pub struct RunOutput {
    pub metrics: Vec<StepMetrics>,
    pub checkpoints: Vec<PathBuf>,
}

/// Trains until `until` completed steps, appending rows to `out/metrics.csv`
/// (created with a header when the run starts from scratch) and writing
/// checkpoints every `checkpoint_every` steps and at the end.
pub fn run<T: Real>(trainer: &mut Trainer<T>, out: &Path, until: usize) -> Result<RunOutput, TrainError> {
    fs::create_dir_all(out)?;
    let csv_path = out.join("metrics.csv");
    let fresh = trainer.iteration == 0 || !csv_path.exists();
    let file = if fresh {
        File::create(&csv_path)?
    } else {
        OpenOptions::new().append(true).open(&csv_path)?
    };
    let mut csv = BufWriter::new(file);
    if fresh {
        writeln!(csv, "{CSV_HEADER}")?;
    }
    let mut result = RunOutput::default();
    let every = trainer.config.checkpoint_every;
    let log_every = trainer.config.log_every;
    while trainer.iteration < until {
        let m = match trainer.step() {
            Ok(m) => m,
            Err(e) => {
                csv.flush()?;
                return Err(e);
            }
        };
        if m.iter % log_every == 0 || m.iter == until {
            writeln!(csv, "{}", m.csv_row())?;
        }
        result.metrics.push(m);
        if (every > 0 && m.iter % every == 0) || m.iter == until {
            csv.flush()?;
            let path = checkpoint_path(out, m.iter);
            save_checkpoint(&trainer.checkpoint()?, &path)?;
            result.checkpoints.push(path);
        }
    }
    csv.flush()?;
    Ok(result)
}
