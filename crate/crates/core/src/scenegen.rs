//! Synthetic dynamic scenes with closed-form motion, used as ground truth.
//!
//! A scene is a ball of object particles that moves according to one motion
//! law, optionally in front of a static backdrop, filmed by a camera on a
//! circular orbit. Flows are obtained by backprojecting each pixel with its
//! opacity-normalized depth and moving that point with the motion law of the
//! particle that dominates the pixel.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::flow::{backproject, FlowField, MotionMask};
use crate::geom::{self, Mat3, Vec3};
use crate::image::Image;
use crate::io::DepthMap;
use crate::physics::analytic::AnalyticField;
use crate::physics::{oracle_stress, ConstitutiveLaw, MaterialState};
use crate::render::{render_cloud, Camera, RenderOutput, RenderSettings, NEAR_PLANE};
use crate::scene::{GaussianCloud, GaussianParticle};

/// Pixels whose accumulated opacity falls below this carry no depth or flow.
pub const MIN_COVERAGE: f64 = 0.5;
/// Object-motion magnitude (pixels) above which a pixel is masked as moving.
pub const MASK_THRESHOLD: f64 = 0.1;

#[derive(Debug, thiserror::Error)]
pub enum SceneError {
    #[error("invalid scene spec: {0}")]
    Invalid(String),
    #[error(transparent)]
    Camera(#[from] crate::render::CameraError),
    #[error(transparent)]
    Ad(#[from] crate::ad::AdError),
    #[error(transparent)]
    Flow(#[from] crate::flow::FlowError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Motion {
    /// Translation at `velocity` plus rotation about the z axis through the
    /// moving object center at `angular_velocity` rad per unit time.
    Rigid {
        velocity: [f64; 3],
        #[serde(default)]
        angular_velocity: f64,
    },
    /// Simple shear `v = (γ y, 0, 0)`.
    Shear { gamma: f64 },
    /// Longitudinal wave `v = A cos(k(X − ct)) ê_x` in a linear elastic solid,
    /// `c² = (λ + 2μ)/ρ`.
    ElasticWave {
        amplitude: f64,
        k: f64,
        lambda: f64,
        mu: f64,
        #[serde(default = "one")]
        density: f64,
    },
    /// Uniform translation.
    Advect { velocity: [f64; 3] },
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectSpec {
    pub count: usize,
    pub center: [f64; 3],
    pub radius: f64,
    /// Range of per-particle standard deviations.
    pub scale: [f64; 2],
    pub opacity: f64,
}

impl Default for ObjectSpec {
    fn default() -> Self {
        Self {
            count: 120,
            center: [0.0; 3],
            radius: 0.6,
            scale: [0.06, 0.12],
            opacity: 0.9,
        }
    }
}

/// Static particles on a square patch of the plane `y = level`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackdropSpec {
    /// Particles per side.
    pub side: usize,
    pub level: f64,
    pub half_extent: f64,
    pub scale: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OrbitSpec {
    pub radius: f64,
    pub height: f64,
    pub start_degrees: f64,
    /// Total sweep over the clip; 0 keeps the camera still.
    pub arc_degrees: f64,
    pub focal: f64,
    pub target: [f64; 3],
}

impl Default for OrbitSpec {
    fn default() -> Self {
        Self {
            radius: 3.0,
            height: 0.0,
            start_degrees: 90.0,
            arc_degrees: 0.0,
            focal: 70.0,
            target: [0.0; 3],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub object: ObjectSpec,
    #[serde(default)]
    pub backdrop: Option<BackdropSpec>,
    pub motion: Motion,
    #[serde(default)]
    pub camera: OrbitSpec,
}

fn default_seed() -> u64 {
    42
}

impl SceneSpec {
    /// 64×64, eight frames, a ball sliding sideways in front of a still camera.
    pub fn rigid_translation() -> Self {
        Self {
            width: 64,
            height: 64,
            frames: 8,
            seed: 42,
            object: ObjectSpec::default(),
            backdrop: None,
            motion: Motion::Rigid {
                velocity: [0.6, 0.0, 0.0],
                angular_velocity: 0.0,
            },
            camera: OrbitSpec::default(),
        }
    }

    /// The same ball, sheared along x in proportion to its height.
    pub fn shear_flow() -> Self {
        Self {
            motion: Motion::Shear { gamma: 0.8 },
            ..Self::rigid_translation()
        }
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        let bad = |m: String| Err(SceneError::Invalid(m));
        if self.frames < 2 {
            return bad(format!("need at least 2 frames, got {}", self.frames));
        }
        if self.object.count == 0 {
            return bad("need at least one object particle".into());
        }
        if self.width == 0 || self.height == 0 {
            return bad("image size must be non-zero".into());
        }
        let o = &self.object;
        if !(o.radius >= 0.0 && o.scale[0] > 0.0 && o.scale[1] >= o.scale[0]) {
            return bad("object radius must be non-negative and 0 < scale[0] <= scale[1]".into());
        }
        if !(o.opacity > 0.0 && o.opacity < 1.0) {
            return bad(format!("object opacity {} outside (0, 1)", o.opacity));
        }
        let c = &self.camera;
        if !(c.radius > 0.0 && c.radius.is_finite()) {
            return bad(format!("camera orbit radius must be positive, got {}", c.radius));
        }
        if !(c.focal > 0.0) {
            return bad("focal length must be positive".into());
        }
        if let Some(b) = &self.backdrop {
            if b.side == 0 || !(b.half_extent > 0.0) || !(b.scale > 0.0) {
                return bad("backdrop needs side >= 1 and positive extent and scale".into());
            }
        }
        if let Motion::ElasticWave { k, lambda, mu, density, .. } = self.motion {
            if !(k > 0.0 && density > 0.0 && lambda + 2.0 * mu > 0.0) {
                return bad("elastic wave needs k > 0, density > 0 and λ + 2μ > 0".into());
            }
        }
        Ok(())
    }

    /// Normalized time of frame `f`.
    pub fn time(&self, f: usize) -> f64 {
        f as f64 / (self.frames - 1) as f64
    }
}

impl Motion {
    fn wave_speed(&self) -> f64 {
        match *self {
            Motion::ElasticWave { lambda, mu, density, .. } => AnalyticField::wave_speed(lambda, mu, density),
            _ => 0.0,
        }
    }

    /// Position at `t` of the material point with reference coordinates `x_ref`.
    /// `center` is the object center at `t = 0`.
    pub fn position(&self, x_ref: &Vec3<f64>, center: &Vec3<f64>, t: f64) -> Vec3<f64> {
        match *self {
            Motion::Rigid {
                velocity,
                angular_velocity,
            } => {
                let r = geom::quat_to_mat(&geom::quat_from_axis_angle(&[0.0, 0.0, 1.0], angular_velocity * t));
                let rel = geom::mat_vec(&r, &geom::sub(x_ref, center));
                geom::add(&geom::add(&rel, center), &geom::scale(&velocity, t))
            }
            Motion::Shear { gamma } => [x_ref[0] + gamma * x_ref[1] * t, x_ref[1], x_ref[2]],
            Motion::ElasticWave { amplitude, k, .. } => {
                let c = self.wave_speed();
                let u = -amplitude / (k * c) * (k * (x_ref[0] - c * t)).sin();
                [x_ref[0] + u, x_ref[1], x_ref[2]]
            }
            Motion::Advect { velocity } => geom::add(x_ref, &geom::scale(&velocity, t)),
        }
    }

    /// Reference coordinates of the material point found at `x` at time `t`.
    pub fn reference(&self, x: &Vec3<f64>, center: &Vec3<f64>, t: f64) -> Vec3<f64> {
        match *self {
            Motion::Rigid {
                velocity,
                angular_velocity,
            } => {
                let r = geom::quat_to_mat(&geom::quat_from_axis_angle(&[0.0, 0.0, 1.0], -angular_velocity * t));
                let moved = geom::sub(&geom::sub(x, &geom::scale(&velocity, t)), center);
                geom::add(&geom::mat_vec(&r, &moved), center)
            }
            Motion::Shear { gamma } => [x[0] - gamma * x[1] * t, x[1], x[2]],
            Motion::ElasticWave { amplitude, k, .. } => {
                // Solve X − (A/kc) sin(k(X − ct)) = x; the map is monotone for |A| < c.
                let c = self.wave_speed();
                let b = amplitude / (k * c);
                let mut xr = x[0];
                for _ in 0..100 {
                    let th = k * (xr - c * t);
                    let f = xr - b * th.sin() - x[0];
                    let step = f / (1.0 - b * k * th.cos());
                    xr -= step;
                    if step.abs() < 1e-15 * (1.0 + xr.abs()) {
                        break;
                    }
                }
                [xr, x[1], x[2]]
            }
            Motion::Advect { velocity } => geom::sub(x, &geom::scale(&velocity, t)),
        }
    }

    /// Velocity at `t` of the material point `x_ref`.
    pub fn velocity(&self, x_ref: &Vec3<f64>, center: &Vec3<f64>, t: f64) -> Vec3<f64> {
        match *self {
            Motion::Rigid {
                velocity,
                angular_velocity,
            } => {
                let x = self.position(x_ref, center, t);
                let c = geom::add(center, &geom::scale(&velocity, t));
                let rel = geom::sub(&x, &c);
                [
                    velocity[0] - angular_velocity * rel[1],
                    velocity[1] + angular_velocity * rel[0],
                    velocity[2],
                ]
            }
            Motion::Shear { gamma } => [gamma * x_ref[1], 0.0, 0.0],
            Motion::ElasticWave { amplitude, k, .. } => {
                let c = self.wave_speed();
                [amplitude * (k * (x_ref[0] - c * t)).cos(), 0.0, 0.0]
            }
            Motion::Advect { velocity } => velocity,
        }
    }

    /// Small strain relative to the unstressed reference.
    pub fn strain(&self, x_ref: &Vec3<f64>, t: f64) -> Mat3<f64> {
        let mut e = [[0.0; 3]; 3];
        match *self {
            Motion::Shear { gamma } => {
                e[0][1] = 0.5 * gamma * t;
                e[1][0] = e[0][1];
            }
            Motion::ElasticWave { amplitude, k, .. } => {
                let c = self.wave_speed();
                e[0][0] = -amplitude / c * (k * (x_ref[0] - c * t)).cos();
            }
            Motion::Rigid { .. } | Motion::Advect { .. } => {}
        }
        e
    }

    /// Cauchy stress; zero unless a constitutive law is implied by the motion.
    pub fn stress(&self, x_ref: &Vec3<f64>, center: &Vec3<f64>, t: f64) -> Mat3<f64> {
        match *self {
            Motion::ElasticWave { lambda, mu, .. } => {
                let state = MaterialState {
                    strain: self.strain(x_ref, t),
                    ..Default::default()
                };
                oracle_stress(ConstitutiveLaw::Elastic { lambda, mu }, &state).expect("elastic law")
            }
            Motion::Rigid {
                velocity,
                angular_velocity,
            } => {
                // Centripetal balance: σ = −½ρω²|r⊥|² I with ρ = 1.
                let x = self.position(x_ref, center, t);
                let c = geom::add(center, &geom::scale(&velocity, t));
                let (dx, dy) = (x[0] - c[0], x[1] - c[1]);
                let state = MaterialState {
                    pressure: 0.5 * angular_velocity * angular_velocity * (dx * dx + dy * dy),
                    ..Default::default()
                };
                oracle_stress(ConstitutiveLaw::Rigid { tolerance: 0.0 }, &state).expect("rigid law")
            }
            Motion::Shear { .. } | Motion::Advect { .. } => [[0.0; 3]; 3],
        }
    }

    /// Eulerian field with the same velocity and stress, when one exists.
    pub fn analytic_field(&self, center: &Vec3<f64>) -> Option<AnalyticField> {
        match *self {
            Motion::Rigid {
                velocity,
                angular_velocity,
            } if velocity == [0.0; 3] => Some(AnalyticField::RigidRotation {
                omega: angular_velocity,
                center: [center[0], center[1]],
                density: 1.0,
            }),
            Motion::Rigid { .. } => None,
            Motion::Shear { gamma } => Some(AnalyticField::Shear { gamma, sigma: [0.0; 6] }),
            Motion::ElasticWave {
                amplitude,
                k,
                lambda,
                mu,
                density,
            } => Some(AnalyticField::ElasticWave {
                amplitude,
                k,
                lambda,
                mu,
                density,
            }),
            Motion::Advect { velocity } => Some(AnalyticField::Uniform {
                v: velocity,
                sigma: [0.0; 6],
            }),
        }
    }
}

/// Closed-form state of one particle.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ParticleTruth {
    pub id: u64,
    pub position: Vec3<f64>,
    pub velocity: Vec3<f64>,
    pub strain: Mat3<f64>,
    pub stress: Mat3<f64>,
}

/// Ground-truth scene together with everything rendered from it.
#[derive(Clone, Debug)]
pub struct SyntheticScene {
    pub spec: SceneSpec,
    /// Pose at `t = 0`; object particles are flagged dynamic.
    pub cloud: GaussianCloud<f64>,
    /// Unstressed reference coordinates per particle.
    pub reference: Vec<Vec3<f64>>,
    pub cameras: Vec<Camera<f64>>,
    pub images: Vec<Image<f64>>,
    pub depths: Vec<DepthMap>,
    /// `flow_b[f]` maps `I_{f+1}` back to `I_f`.
    pub flow_b: Vec<FlowField<f64>>,
    /// `flow_f[f]` maps `I_f` forward to `I_{f+1}`.
    pub flow_f: Vec<FlowField<f64>>,
    /// Object motion from `t_f` to `t_{f+1}` seen by camera `f`, on `I_f`.
    pub motion_flow: Vec<FlowField<f64>>,
    pub masks: Vec<MotionMask>,
    /// Per frame and pixel, the backprojected point carried by the flows.
    pub surface: Vec<Vec<Option<SurfacePoint>>>,
}

impl SyntheticScene {
    pub fn frames(&self) -> usize {
        self.spec.frames
    }

    fn center(&self) -> Vec3<f64> {
        self.spec.object.center
    }

    /// The cloud posed at normalized time `t`.
    pub fn pose_at(&self, t: f64) -> GaussianCloud<f64> {
        let mut cloud = self.cloud.clone();
        let c = self.center();
        let motion = self.spec.motion;
        for (p, x_ref) in cloud.particles.iter_mut().zip(&self.reference) {
            if !p.dynamic {
                continue;
            }
            p.mu = motion.position(x_ref, &c, t);
            if let Motion::Rigid { angular_velocity, .. } = motion {
                let r = geom::quat_from_axis_angle(&[0.0, 0.0, 1.0], angular_velocity * t);
                p.q = geom::quat_normalize(&geom::quat_mul(&r, &p.q));
            }
        }
        cloud
    }

    /// Position, velocity, strain and stress of every particle at `t`.
    pub fn analytic_truth(&self, t: f64) -> Vec<ParticleTruth> {
        let c = self.center();
        let motion = self.spec.motion;
        self.cloud
            .particles
            .iter()
            .zip(&self.reference)
            .map(|(p, x_ref)| {
                if p.dynamic {
                    ParticleTruth {
                        id: p.id,
                        position: motion.position(x_ref, &c, t),
                        velocity: motion.velocity(x_ref, &c, t),
                        strain: motion.strain(x_ref, t),
                        stress: motion.stress(x_ref, &c, t),
                    }
                } else {
                    ParticleTruth {
                        id: p.id,
                        position: p.mu,
                        velocity: [0.0; 3],
                        strain: [[0.0; 3]; 3],
                        stress: [[0.0; 3]; 3],
                    }
                }
            })
            .collect()
    }

    /// Moves a world point found at `t_from` to `t_to` with the motion of the
    /// object (`dynamic`) or leaves it (backdrop).
    pub fn carry(&self, x: &Vec3<f64>, dynamic: bool, t_from: f64, t_to: f64) -> Vec3<f64> {
        if !dynamic {
            return *x;
        }
        let c = self.center();
        let x_ref = self.spec.motion.reference(x, &c, t_from);
        self.spec.motion.position(&x_ref, &c, t_to)
    }
}

/// Surface sample of one pixel: world point and whether it moves.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SurfacePoint {
    pub world: Vec3<f64>,
    pub dynamic: bool,
}

struct FrameRender {
    image: Image<f64>,
    depth: DepthMap,
    points: Vec<Option<SurfacePoint>>,
}

fn render_frame(
    cloud: &GaussianCloud<f64>,
    cam: &Camera<f64>,
    settings: &RenderSettings,
) -> Result<FrameRender, SceneError> {
    let out: RenderOutput<f64> = render_cloud(cloud, None, cam, 0.0, settings)?;
    let (w, h) = (cam.width, cam.height);
    let image = Image::from_pixels(w, h, &out.color);
    let mut depth = vec![0.0; w * h];
    let mut points = vec![None; w * h];
    for p in 0..w * h {
        let cover = 1.0 - out.transmittance[p];
        if cover <= 1e-12 {
            continue;
        }
        let d = out.depth[p] / cover;
        depth[p] = d;
        let Some(top) = out.topk[p].first() else { continue };
        if cover < MIN_COVERAGE || d <= NEAR_PLANE {
            continue;
        }
        let px = [(p % w) as f64, (p / w) as f64];
        let world = cam.to_world(&backproject(cam, px, d)?);
        points[p] = Some(SurfacePoint {
            world,
            dynamic: cloud.particles[top.index].dynamic,
        });
    }
    Ok(FrameRender {
        image,
        depth: DepthMap {
            width: w,
            height: h,
            data: depth,
        },
        points,
    })
}

fn orbit_cameras(spec: &SceneSpec) -> Result<Vec<Camera<f64>>, SceneError> {
    let o = &spec.camera;
    (0..spec.frames)
        .map(|f| {
            let phi = (o.start_degrees + o.arc_degrees * spec.time(f)).to_radians();
            let eye = [
                o.target[0] + o.radius * phi.cos(),
                o.target[1] + o.height,
                o.target[2] + o.radius * phi.sin(),
            ];
            Ok(Camera::look_at(eye, o.target, [0.0, 1.0, 0.0], o.focal, spec.width, spec.height)?)
        })
        .collect()
}

fn sample_ball(rng: &mut impl Rng, radius: f64) -> Vec3<f64> {
    loop {
        let p: Vec3<f64> = std::array::from_fn(|_| rng.gen_range(-1.0..=1.0));
        if geom::dot(&p, &p) <= 1.0 {
            return geom::scale(&p, radius);
        }
    }
}

fn build_cloud(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> (GaussianCloud<f64>, Vec<Vec3<f64>>) {
    let o = &spec.object;
    let mut cloud = GaussianCloud::new();
    let mut reference = Vec::new();
    for _ in 0..o.count {
        let x_ref = geom::add(&o.center, &sample_ball(rng, o.radius));
        let scale = rng.gen_range(o.scale[0]..=o.scale[1]);
        // Smooth color pattern plus per-particle variation gives texture.
        let rgb: [f64; 3] = std::array::from_fn(|c| {
            let phase = 2.1 * c as f64;
            let smooth = 0.5 + 0.3 * (3.0 * x_ref[0] + 2.0 * x_ref[1] - x_ref[2] + phase).sin();
            (smooth + rng.gen_range(-0.15..=0.15)).clamp(0.05, 0.95)
        });
        let mut p = GaussianParticle::new([0.0; 3], scale, rgb, o.opacity, 0);
        let axis = sample_ball(rng, 1.0);
        let n = geom::norm(&axis).max(1e-9);
        p.q = geom::quat_from_axis_angle(&geom::scale(&axis, 1.0 / n), rng.gen_range(0.0..std::f64::consts::PI));
        for s in p.log_scale.iter_mut() {
            *s += rng.gen_range(-0.25..=0.25);
        }
        p.mu = spec.motion.position(&x_ref, &o.center, 0.0);
        cloud.insert(p);
        reference.push(x_ref);
    }
    if let Some(b) = &spec.backdrop {
        for i in 0..b.side {
            for j in 0..b.side {
                let u = if b.side == 1 { 0.0 } else { i as f64 / (b.side - 1) as f64 * 2.0 - 1.0 };
                let v = if b.side == 1 { 0.0 } else { j as f64 / (b.side - 1) as f64 * 2.0 - 1.0 };
                let x = [u * b.half_extent, b.level, v * b.half_extent];
                let checker = ((i + j) % 2) as f64;
                let rgb = [0.25 + 0.5 * checker, 0.4, 0.75 - 0.5 * checker];
                let mut p = GaussianParticle::new(x, b.scale, rgb, 0.95, 0);
                p.dynamic = false;
                cloud.insert(p);
                reference.push(x);
            }
        }
    }
    (cloud, reference)
}

fn project_point(cam: &Camera<f64>, x: &Vec3<f64>) -> Option<[f64; 2]> {
    let (p, z) = cam.project_world(x);
    (z > NEAR_PLANE).then_some(p)
}

/// Renders targets and derives exact flows, depths and masks.
pub fn generate(spec: &SceneSpec) -> Result<SyntheticScene, SceneError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (cloud, reference) = build_cloud(spec, &mut rng);
    let cameras = orbit_cameras(spec)?;
    let settings = RenderSettings::default();
    let mut scene = SyntheticScene {
        spec: spec.clone(),
        cloud,
        reference,
        cameras,
        images: Vec::new(),
        depths: Vec::new(),
        flow_b: Vec::new(),
        flow_f: Vec::new(),
        motion_flow: Vec::new(),
        masks: Vec::new(),
        surface: Vec::new(),
    };
    let renders: Vec<FrameRender> = (0..spec.frames)
        .into_par_iter()
        .map(|f| render_frame(&scene.pose_at(spec.time(f)), &scene.cameras[f], &settings))
        .collect::<Result<_, _>>()?;

    let (w, h) = (spec.width, spec.height);
    let n = spec.frames;
    for f in 0..n {
        let t = spec.time(f);
        let cam = &scene.cameras[f];
        let mut motion = FlowField::new(w, h);
        let mut mask = MotionMask::filled(w, h, false);
        // Neighbor used for the mask: next frame, or previous for the last.
        let other = if f + 1 < n { f + 1 } else { f - 1 };
        let t_other = spec.time(other);
        for (p, pt) in renders[f].points.iter().enumerate() {
            let Some(pt) = pt else { continue };
            let (Some(a), Some(b)) = (
                project_point(cam, &pt.world),
                project_point(cam, &scene.carry(&pt.world, pt.dynamic, t, t_other)),
            ) else {
                continue;
            };
            let d = [b[0] - a[0], b[1] - a[1]];
            if f + 1 < n {
                motion.set(p % w, p / w, d);
            }
            mask.data[p] = d[0].hypot(d[1]) > MASK_THRESHOLD;
        }
        if f + 1 < n {
            scene.motion_flow.push(motion);
        }
        scene.masks.push(mask);
    }
    for f in 0..n - 1 {
        let (t0, t1) = (spec.time(f), spec.time(f + 1));
        let (c0, c1) = (&scene.cameras[f], &scene.cameras[f + 1]);
        let mut back = FlowField::new(w, h);
        for (p, pt) in renders[f + 1].points.iter().enumerate() {
            let Some(pt) = pt else { continue };
            let p4 = [(p % w) as f64, (p / w) as f64];
            if let Some(p1) = project_point(c0, &scene.carry(&pt.world, pt.dynamic, t1, t0)) {
                back.set(p % w, p / w, [p1[0] - p4[0], p1[1] - p4[1]]);
            }
        }
        let mut fwd = FlowField::new(w, h);
        for (p, pt) in renders[f].points.iter().enumerate() {
            let Some(pt) = pt else { continue };
            let p1 = [(p % w) as f64, (p / w) as f64];
            if let Some(p4) = project_point(c1, &scene.carry(&pt.world, pt.dynamic, t0, t1)) {
                fwd.set(p % w, p / w, [p4[0] - p1[0], p4[1] - p1[1]]);
            }
        }
        scene.flow_b.push(back);
        scene.flow_f.push(fwd);
    }
    for r in renders {
        scene.images.push(r.image);
        scene.depths.push(r.depth);
        scene.surface.push(r.points);
    }
    Ok(scene)
}

/// Object motion flow on `I_{f+1}` relative to `I_f`, as seen by camera
/// `f`: the quantity the backward decomposition is expected to recover.
pub fn analytic_motion_flow_backward(scene: &SyntheticScene, f: usize) -> FlowField<f64> {
    let spec = &scene.spec;
    let (w, h) = (spec.width, spec.height);
    let (t0, t1) = (spec.time(f), spec.time(f + 1));
    let c0 = &scene.cameras[f];
    let mut out = FlowField::new(w, h);
    for (p, pt) in scene.surface[f + 1].iter().enumerate() {
        let Some(pt) = pt else { continue };
        let earlier = scene.carry(&pt.world, pt.dynamic, t1, t0);
        if let (Some(p2), Some(p1)) = (project_point(c0, &pt.world), project_point(c0, &earlier)) {
            out.set(p % w, p / w, [p2[0] - p1[0], p2[1] - p1[1]]);
        }
    }
    out
}
