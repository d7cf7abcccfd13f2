//! Canonical Gaussian cloud: storage, covariance, densification with
//! inherited identities, pruning and static/dynamic partitioning.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ad::Tensor;
use crate::flow::MotionMask;
use crate::geom::{self, Mat3, Quat, Vec3};
use crate::render::Camera;
use crate::scalar::Real;

/// Degree-0 real spherical-harmonic constant.
pub const SH_C0: f64 = 0.282_094_791_773_878_14;
/// Degree-1 real spherical-harmonic constant.
pub const SH_C1: f64 = 0.488_602_511_902_919_9;
/// Coefficients per particle: 4 basis functions x RGB, basis-major.
pub const SH_COEFFS: usize = 12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianParticle<T> {
    pub mu: Vec3<T>,
    /// Unit quaternion `(w, x, y, z)`.
    pub q: Quat<T>,
    /// Per-axis log standard deviations.
    pub log_scale: Vec3<T>,
    pub sh: [T; SH_COEFFS],
    /// Opacity logit.
    pub opacity: T,
    /// Persistent identity; densified children inherit their parent's.
    pub id: u64,
    pub dynamic: bool,
}

impl<T: Real> GaussianParticle<T> {
    /// Isotropic particle with a view-independent base color.
    pub fn new(mu: Vec3<T>, scale: T, rgb: [T; 3], opacity: T, id: u64) -> Self {
        let mut sh = [T::zero(); SH_COEFFS];
        for c in 0..3 {
            sh[c] = (rgb[c] - T::of(0.5)) / T::of(SH_C0);
        }
        let p = opacity.max(T::of(1e-6)).min(T::of(1.0 - 1e-6));
        Self {
            mu,
            q: [T::one(), T::zero(), T::zero(), T::zero()],
            log_scale: [scale.ln(); 3],
            sh,
            opacity: (p / (T::one() - p)).ln(),
            id,
            dynamic: true,
        }
    }

    pub fn scale(&self) -> Vec3<T> {
        self.log_scale.map(|s| s.exp())
    }

    pub fn max_scale(&self) -> T {
        let s = self.scale();
        s[0].max(s[1]).max(s[2])
    }

    pub fn alpha(&self) -> T {
        crate::ad::sigmoid(self.opacity)
    }

    pub fn covariance(&self) -> Mat3<T> {
        covariance(&self.q, &self.log_scale)
    }

    /// Color seen from direction `dir` (unit vector from camera to particle).
    pub fn color(&self, dir: &Vec3<T>) -> [T; 3] {
        sh_color(&self.sh, dir)
    }
}

/// Degree-1 SH evaluation plus the 0.5 offset, clamped to `[0, 1]`.
pub fn sh_color<T: Real>(sh: &[T; SH_COEFFS], dir: &Vec3<T>) -> [T; 3] {
    let basis = sh_basis(dir);
    let mut out = [T::zero(); 3];
    for (c, o) in out.iter_mut().enumerate() {
        let mut v = T::of(0.5);
        for (k, b) in basis.iter().enumerate() {
            v += *b * sh[k * 3 + c];
        }
        *o = v.max(T::zero()).min(T::one());
    }
    out
}

pub fn sh_basis<T: Real>(dir: &Vec3<T>) -> [T; 4] {
    let c1 = T::of(SH_C1);
    [T::of(SH_C0), -c1 * dir[1], c1 * dir[2], -c1 * dir[0]]
}

/// `R diag(exp(s))^2 R^T` for unit quaternion `q` and log-scales `s`.
pub fn covariance<T: Real>(q: &Quat<T>, log_scale: &Vec3<T>) -> Mat3<T> {
    let r = geom::quat_to_mat(q);
    let var = log_scale.map(|s| (s + s).exp());
    let mut out = [[T::zero(); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let mut acc = T::zero();
            for k in 0..3 {
                acc += r[i][k] * var[k] * r[j][k];
            }
            out[i][j] = acc;
        }
    }
    // exact symmetry
    for i in 0..3 {
        for j in 0..i {
            out[i][j] = out[j][i];
        }
    }
    out
}

/// Axis-aligned box used to map world positions into `[0, 1]^3`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneBounds {
    pub lo: [f64; 3],
    pub extent: [f64; 3],
}

impl SceneBounds {
    /// Box around `points`, padded by `margin` (fraction of the span) per side.
    pub fn around(points: &[[f64; 3]], margin: f64) -> Self {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in points {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let mut extent = [1.0; 3];
        for a in 0..3 {
            if !lo[a].is_finite() {
                lo[a] = -0.5;
                hi[a] = 0.5;
            }
            let span = (hi[a] - lo[a]).max(1e-3);
            lo[a] -= margin * span;
            extent[a] = span * (1.0 + 2.0 * margin);
        }
        Self { lo, extent }
    }

    pub fn normalize<T: Real>(&self, p: &Vec3<T>) -> Vec3<T> {
        let mut out = [T::zero(); 3];
        for a in 0..3 {
            out[a] = (p[a] - T::of(self.lo[a])) / T::of(self.extent[a]);
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct GaussianCloud<T> {
    pub particles: Vec<GaussianParticle<T>>,
    /// Next never-used identity.
    pub next_id: u64,
}

impl<T: Real> GaussianCloud<T> {
    pub fn new() -> Self {
        Self {
            particles: Vec::new(),
            next_id: 0,
        }
    }

    /// Appends a particle under a fresh identity; returns the id.
    pub fn insert(&mut self, mut p: GaussianParticle<T>) -> u64 {
        p.id = self.next_id;
        self.next_id += 1;
        self.particles.push(p);
        p_id(self.particles.last())
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn ids(&self) -> Vec<u64> {
        self.particles.iter().map(|p| p.id).collect()
    }

    pub fn dynamic_count(&self) -> usize {
        self.particles.iter().filter(|p| p.dynamic).count()
    }
}

/// Column-stacked particle attributes, the layout the renderer consumes.
#[derive(Clone, Debug, PartialEq)]
pub struct CloudTensors<T> {
    pub mu: Tensor<T>,
    pub q: Tensor<T>,
    pub log_scale: Tensor<T>,
    pub sh: Tensor<T>,
    /// Opacity logits `[N, 1]`.
    pub opacity: Tensor<T>,
}

impl<T: Real> CloudTensors<T> {
    pub fn from_cloud(cloud: &GaussianCloud<T>) -> Self {
        let n = cloud.len();
        let mut mu = Vec::with_capacity(n * 3);
        let mut q = Vec::with_capacity(n * 4);
        let mut s = Vec::with_capacity(n * 3);
        let mut sh = Vec::with_capacity(n * SH_COEFFS);
        let mut o = Vec::with_capacity(n);
        for p in &cloud.particles {
            mu.extend_from_slice(&p.mu);
            q.extend_from_slice(&p.q);
            s.extend_from_slice(&p.log_scale);
            sh.extend_from_slice(&p.sh);
            o.push(p.opacity);
        }
        let t = |cols: usize, d: Vec<T>| Tensor::new(vec![n, cols], d).expect("cloud tensor shape");
        Self {
            mu: t(3, mu),
            q: t(4, q),
            log_scale: t(3, s),
            sh: t(SH_COEFFS, sh),
            opacity: t(1, o),
        }
    }

    /// Writes attributes back into `cloud`, renormalizing quaternions.
    pub fn write_back(&self, cloud: &mut GaussianCloud<T>) {
        for (i, p) in cloud.particles.iter_mut().enumerate() {
            p.mu.copy_from_slice(self.mu.row(i));
            let q = [self.q.at(i, 0), self.q.at(i, 1), self.q.at(i, 2), self.q.at(i, 3)];
            p.q = if geom::quat_norm(&q).as_f64() > crate::ops3d::MIN_QUAT_NORM {
                geom::quat_normalize(&q)
            } else {
                [T::one(), T::zero(), T::zero(), T::zero()]
            };
            p.log_scale.copy_from_slice(self.log_scale.row(i));
            p.sh.copy_from_slice(self.sh.row(i));
            p.opacity = self.opacity.data()[i];
        }
    }
}

fn p_id<T>(p: Option<&GaussianParticle<T>>) -> u64 {
    p.map(|p| p.id).unwrap_or(0)
}

/// Where each row of a rebuilt cloud came from: `Some(i)` = old row `i`
/// carried over, `None` = freshly created child.
pub type RowOrigins = Vec<Option<usize>>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensifyParams {
    /// Mean screen-space positional gradient norm that triggers densification.
    pub grad_threshold: f64,
    /// Particles with max scale at or below `percent_dense * extent` are cloned, larger ones split.
    pub percent_dense: f64,
    pub split_factor: f64,
    pub max_particles: usize,
}

impl Default for DensifyParams {
    fn default() -> Self {
        Self {
            grad_threshold: 2e-4,
            percent_dense: 0.01,
            split_factor: 1.6,
            max_particles: usize::MAX,
        }
    }
}

/// Accumulated positional-gradient norms per particle.
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct DensifyStats {
    pub grad_sum: Vec<f64>,
    pub count: Vec<u32>,
}

impl DensifyStats {
    pub fn new(n: usize) -> Self {
        Self {
            grad_sum: vec![0.0; n],
            count: vec![0; n],
        }
    }

    pub fn record(&mut self, norms: &[f64], visible: &[bool]) {
        for i in 0..self.grad_sum.len().min(norms.len()) {
            if visible[i] {
                self.grad_sum[i] += norms[i];
                self.count[i] += 1;
            }
        }
    }

    pub fn mean(&self, i: usize) -> f64 {
        if self.count[i] == 0 {
            0.0
        } else {
            self.grad_sum[i] / self.count[i] as f64
        }
    }

    pub fn remap(&self, origins: &RowOrigins) -> Self {
        let mut out = Self::new(origins.len());
        for (new, o) in origins.iter().enumerate() {
            if let Some(old) = *o {
                out.grad_sum[new] = self.grad_sum[old];
                out.count[new] = self.count[old];
            }
        }
        out
    }
}

/// Clones small and splits large particles whose mean positional gradient
/// reaches the threshold. Children keep their parent's `id`.
pub fn densify<T: Real>(
    cloud: &GaussianCloud<T>,
    stats: &DensifyStats,
    params: &DensifyParams,
    extent: f64,
    rng: &mut impl Rng,
) -> (GaussianCloud<T>, RowOrigins) {
    let n = cloud.len();
    let mut kept: Vec<GaussianParticle<T>> = Vec::with_capacity(n);
    let mut origins: RowOrigins = Vec::with_capacity(n);
    let mut children: Vec<GaussianParticle<T>> = Vec::new();
    let cutoff = params.percent_dense * extent;
    let mut budget = params.max_particles.saturating_sub(n);
    for (i, p) in cloud.particles.iter().enumerate() {
        let hot = i < stats.grad_sum.len() && stats.mean(i) >= params.grad_threshold;
        if !hot || budget == 0 {
            kept.push(p.clone());
            origins.push(Some(i));
            continue;
        }
        if p.max_scale().as_f64() <= cutoff {
            kept.push(p.clone());
            origins.push(Some(i));
            children.push(p.clone());
            budget -= 1;
        } else {
            let shrink = T::of(params.split_factor.ln());
            let r = geom::quat_to_mat(&p.q);
            let s = p.scale();
            for _ in 0..2 {
                let u = sample_unit_ball(rng);
                let local = [s[0] * T::of(u[0]), s[1] * T::of(u[1]), s[2] * T::of(u[2])];
                let mut c = p.clone();
                c.mu = geom::add(&p.mu, &geom::mat_vec(&r, &local));
                c.log_scale = p.log_scale.map(|v| v - shrink);
                children.push(c);
            }
            budget -= 1;
        }
    }
    for c in children {
        kept.push(c);
        origins.push(None);
    }
    (
        GaussianCloud {
            particles: kept,
            next_id: cloud.next_id,
        },
        origins,
    )
}

fn sample_unit_ball(rng: &mut impl Rng) -> [f64; 3] {
    loop {
        let u = [
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        ];
        if u[0] * u[0] + u[1] * u[1] + u[2] * u[2] < 1.0 {
            return u;
        }
    }
}

/// Opacity below which particles are always pruned.
pub const MIN_OPACITY: f64 = 0.005;

/// Removes particles whose largest scale exceeds `threshold * extent` or whose
/// opacity falls below [`MIN_OPACITY`].
pub fn prune_by_scale<T: Real>(
    cloud: &GaussianCloud<T>,
    threshold: f64,
    extent: f64,
) -> (GaussianCloud<T>, RowOrigins) {
    let cutoff = threshold * extent;
    let mut particles = Vec::with_capacity(cloud.len());
    let mut origins = Vec::with_capacity(cloud.len());
    for (i, p) in cloud.particles.iter().enumerate() {
        if p.max_scale().as_f64() > cutoff || p.alpha().as_f64() < MIN_OPACITY {
            continue;
        }
        particles.push(p.clone());
        origins.push(Some(i));
    }
    (
        GaussianCloud {
            particles,
            next_id: cloud.next_id,
        },
        origins,
    )
}

/// Flags a particle dynamic when its projected center lands inside the
/// motion mask in at least `min_fraction` of the frames where it is visible.
///
/// `centers[f][i]` is particle `i`'s world center at frame `f`.
pub fn partition_dynamic<T: Real>(
    centers: &[Vec<Vec3<T>>],
    masks: &[MotionMask],
    cameras: &[Camera<T>],
    min_fraction: f64,
) -> Vec<bool> {
    let n = centers.first().map_or(0, |c| c.len());
    let mut visible = vec![0usize; n];
    let mut inside = vec![0usize; n];
    for ((frame, mask), cam) in centers.iter().zip(masks).zip(cameras) {
        for (i, c) in frame.iter().enumerate() {
            let (p, z) = cam.project_world(c);
            if z.as_f64() <= crate::render::NEAR_PLANE {
                continue;
            }
            let (u, v) = (p[0].as_f64().round(), p[1].as_f64().round());
            if u < 0.0 || v < 0.0 || u >= mask.width as f64 || v >= mask.height as f64 {
                continue;
            }
            visible[i] += 1;
            if mask.get(u as usize, v as usize) {
                inside[i] += 1;
            }
        }
    }
    (0..n)
        .map(|i| visible[i] > 0 && inside[i] as f64 >= min_fraction * visible[i] as f64)
        .collect()
}
