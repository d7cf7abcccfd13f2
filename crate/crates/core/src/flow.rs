//! Optical-flow geometry: camera/motion decomposition with backward warping,
//! Gaussian and velocity flow from top-K splat weights, and the flow-matching
//! loss.

use crate::ad::{AdError, Backward, Tape, Tensor, Var};
use crate::geom::{Sym2, Vec3};
use crate::render::{Camera, RenderOutput, TopKEntry, NEAR_PLANE, PROJ_COLS};
use crate::scalar::Real;

/// Eigenvalues below this (px²) make a contributor unusable for flow.
pub const MIN_EIGENVALUE: f64 = 1e-12;
/// Flow-matching weights of Gaussian and velocity flow.
pub const LAMBDA_G: f64 = 0.5;
pub const LAMBDA_V: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FlowError {
    #[error("depth must be positive, got {0}")]
    NonPositiveDepth(f64),
    #[error("matrix has negative eigenvalue {0}")]
    NegativeEigenvalue(f64),
    #[error("size mismatch: {0}")]
    SizeMismatch(String),
}

/// Dense per-pixel 2-vector field; invalid pixels hold `(0, 0)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField<T> {
    pub width: usize,
    pub height: usize,
    pub data: Vec<[T; 2]>,
    pub valid: Vec<bool>,
}

impl<T: Real> FlowField<T> {
    /// All-invalid field.
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![[T::zero(); 2]; width * height],
            valid: vec![false; width * height],
        }
    }

    /// All-valid field of a constant vector.
    pub fn constant(width: usize, height: usize, v: [T; 2]) -> Self {
        Self {
            width,
            height,
            data: vec![v; width * height],
            valid: vec![true; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> Option<[T; 2]> {
        let i = y * self.width + x;
        self.valid[i].then(|| self.data[i])
    }

    pub fn set(&mut self, x: usize, y: usize, v: [T; 2]) {
        let i = y * self.width + x;
        self.data[i] = v;
        self.valid[i] = true;
    }

    pub fn invalidate(&mut self, x: usize, y: usize) {
        let i = y * self.width + x;
        self.data[i] = [T::zero(); 2];
        self.valid[i] = false;
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    fn same_size<U>(&self, other: &FlowField<U>) -> Result<(), FlowError> {
        if self.width != other.width || self.height != other.height {
            return Err(FlowError::SizeMismatch(format!(
                "{}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        Ok(())
    }
}

/// Binary per-pixel mask of significant motion.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MotionMask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl MotionMask {
    pub fn filled(width: usize, height: usize, value: bool) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    /// Valid pixels whose flow magnitude exceeds `threshold` px.
    pub fn from_flow<T: Real>(flow: &FlowField<T>, threshold: f64) -> Self {
        let data = flow
            .data
            .iter()
            .zip(&flow.valid)
            .map(|(v, ok)| *ok && (v[0] * v[0] + v[1] * v[1]).sqrt().as_f64() > threshold)
            .collect();
        Self {
            width: flow.width,
            height: flow.height,
            data,
        }
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|v| **v).count()
    }
}

/// Camera-space point `K^-1 D (u, v, 1)`.
pub fn backproject<T: Real>(cam: &Camera<T>, p: [T; 2], depth: T) -> Result<Vec3<T>, FlowError> {
    if !(depth > T::zero()) {
        return Err(FlowError::NonPositiveDepth(depth.as_f64()));
    }
    Ok(cam.unproject(p, depth))
}

/// Splits a backward flow at `I_{t+1}` into camera and motion flow.
///
/// For every pixel `p4` of `I_{t+1}`: `p2` is `p4` backprojected with its
/// depth in `cam_next` and reprojected into `cam_t`; camera flow is
/// `p4 − p2` and motion flow is `p2 − p1` with `p1 = p4 + flow_b(p4)`.
/// Pixels with invalid flow, non-positive depth, or `p2` outside `I_t` are
/// invalid in both outputs.
pub fn decompose_backward<T: Real>(
    flow_b: &FlowField<T>,
    depth_next: &[T],
    cam_t: &Camera<T>,
    cam_next: &Camera<T>,
) -> Result<(FlowField<T>, FlowField<T>), FlowError> {
    let (w, h) = (flow_b.width, flow_b.height);
    if depth_next.len() != w * h {
        return Err(FlowError::SizeMismatch(format!(
            "depth has {} values for a {w}x{h} flow",
            depth_next.len()
        )));
    }
    let mut camera = FlowField::new(w, h);
    let mut motion = FlowField::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let Some(fb) = flow_b.get(x, y) else { continue };
            let d = depth_next[y * w + x];
            if !(d > T::zero()) {
                continue;
            }
            let p4 = [T::of(x as f64), T::of(y as f64)];
            let world = cam_next.to_world(&backproject(cam_next, p4, d)?);
            let (p2, z) = cam_t.project_world(&world);
            if z.as_f64() <= NEAR_PLANE || !cam_t.in_image(p2) {
                continue;
            }
            let p1 = [p4[0] + fb[0], p4[1] + fb[1]];
            camera.set(x, y, [p4[0] - p2[0], p4[1] - p2[1]]);
            motion.set(x, y, [p2[0] - p1[0], p2[1] - p1[1]]);
        }
    }
    Ok((camera, motion))
}

/// Re-expresses `field` (defined on `I_{t+1}`) on the `I_t` grid by sampling
/// it bilinearly at `p1 + forward(p1)`. Samples leaving the frame or touching
/// an invalid pixel are invalid.
pub fn warp_flow_forward<T: Real>(field: &FlowField<T>, forward: &FlowField<T>) -> Result<FlowField<T>, FlowError> {
    field.same_size(forward)?;
    let (w, h) = (field.width, field.height);
    let mut out = FlowField::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let Some(f) = forward.get(x, y) else { continue };
            let sx = T::of(x as f64) + f[0];
            let sy = T::of(y as f64) + f[1];
            if let Some(v) = bilinear(field, sx, sy) {
                out.set(x, y, v);
            }
        }
    }
    Ok(out)
}

fn bilinear<T: Real>(field: &FlowField<T>, sx: T, sy: T) -> Option<[T; 2]> {
    let (w, h) = (field.width, field.height);
    let (fx, fy) = (sx.as_f64(), sy.as_f64());
    if !(fx >= 0.0 && fy >= 0.0 && fx <= (w - 1) as f64 && fy <= (h - 1) as f64) {
        return None;
    }
    let x0 = (fx.floor() as usize).min(w - 1);
    let y0 = (fy.floor() as usize).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let tx = sx - T::of(x0 as f64);
    let ty = sy - T::of(y0 as f64);
    let mut out = [T::zero(); 2];
    for (xx, yy, wgt) in [
        (x0, y0, (T::one() - tx) * (T::one() - ty)),
        (x1, y0, tx * (T::one() - ty)),
        (x0, y1, (T::one() - tx) * ty),
        (x1, y1, tx * ty),
    ] {
        if wgt == T::zero() {
            continue;
        }
        let v = field.get(xx, yy)?;
        out[0] += wgt * v[0];
        out[1] += wgt * v[1];
    }
    Some(out)
}

/// Symmetric square root of a positive semi-definite 2x2 matrix.
pub fn sqrt2x2<T: Real>(m: &Sym2<T>) -> Result<Sym2<T>, FlowError> {
    let ([l1, l2], u) = m.eigen();
    let tol = T::of(1e-12) * (l1.abs() + T::one());
    if l2 < -tol {
        return Err(FlowError::NegativeEigenvalue(l2.as_f64()));
    }
    let (r1, r2) = (l1.max(T::zero()).sqrt(), l2.max(T::zero()).sqrt());
    // U diag(r1, r2) U^T with U = [u, u_perp]
    let (ux, uy) = (u[0], u[1]);
    Ok(Sym2::new(
        r1 * ux * ux + r2 * uy * uy,
        (r1 - r2) * ux * uy,
        r1 * uy * uy + r2 * ux * ux,
    ))
}

/// Shared-eigenbasis stretch between two frames of one contributor.
#[derive(Clone, Copy, Debug)]
struct Stretch<T> {
    /// Unit eigenvectors of the `t` covariance (columns of `U`).
    axes: [[T; 2]; 2],
    lambda_t: [T; 2],
    lambda_next: [T; 2],
    ratio: [T; 2],
}

impl<T: Real> Stretch<T> {
    fn new(cov_t: &Sym2<T>, cov_next: &Sym2<T>) -> Option<Self> {
        let (lt, u) = cov_t.eigen();
        let axes = [u, [-u[1], u[0]]];
        let mut ln = [T::zero(); 2];
        for k in 0..2 {
            ln[k] = cov_next.quad(axes[k]);
        }
        let eps = T::of(MIN_EIGENVALUE);
        if lt.iter().chain(ln.iter()).any(|v| !(*v >= eps)) {
            return None;
        }
        Some(Self {
            axes,
            lambda_t: lt,
            lambda_next: ln,
            ratio: [(ln[0] / lt[0]).sqrt(), (ln[1] / lt[1]).sqrt()],
        })
    }

    /// `U diag(ratio) U^T d`.
    fn apply(&self, d: [T; 2]) -> [T; 2] {
        let mut out = [T::zero(); 2];
        for k in 0..2 {
            let e = self.axes[k][0] * d[0] + self.axes[k][1] * d[1];
            out[0] += self.ratio[k] * e * self.axes[k][0];
            out[1] += self.ratio[k] * e * self.axes[k][1];
        }
        out
    }
}

/// `∂(gᵀ M d) / ∂(a, b, c)` of the frame-`t` covariance, through both its
/// eigenvalues and the rotation of the shared axes.
///
/// With `θ = ½ atan2(2b, a − c)`, `u₁ = (cos θ, sin θ)`, `u₂ = (−sin θ, cos θ)`
/// and `M = Σ rₖ uₖuₖᵀ`, `rₖ = √(nₖ/λₖ)`, `nₖ = uₖᵀ Σ' uₖ`. The rotation term
/// is dropped for an isotropic covariance, where the axes are arbitrary.
fn stretch_cov_grad<T: Real>(cov_t: &Sym2<T>, cov_n: &Sym2<T>, d: [T; 2], g: [T; 2]) -> [T; 3] {
    let (a, b, c) = (cov_t.a, cov_t.b, cov_t.c);
    let x = a - c;
    let rr = x * x + T::of(4.0) * b * b; // (2R)²
    let r = T::of(0.5) * rr.sqrt();
    let half = T::of(0.5);
    let theta = half * (T::of(2.0) * b).atan2(x);
    let (sn, cs) = (theta.sin(), theta.cos());
    let u = [[cs, sn], [-sn, cs]];
    let m = half * (a + c);
    let lambda = [m + r, m - r];
    let dot = |p: [T; 2], q: [T; 2]| p[0] * q[0] + p[1] * q[1];
    let n = [cov_n.quad(u[0]), cov_n.quad(u[1])];
    let eps = T::of(MIN_EIGENVALUE);
    if lambda.iter().chain(n.iter()).any(|v| !(*v >= eps)) {
        return [T::zero(); 3];
    }
    let ratio = [(n[0] / lambda[0]).sqrt(), (n[1] / lambda[1]).sqrt()];
    let e = [dot(u[0], d), dot(u[1], d)];
    let gm = [dot(u[0], g), dot(u[1], g)];
    let big_g = [gm[0] * e[0], gm[1] * e[1]];
    // ∂φ/∂λₖ = −rₖ Gₖ / (2λₖ)
    let dl = [
        -ratio[0] * big_g[0] * half / lambda[0],
        -ratio[1] * big_g[1] * half / lambda[1],
    ];
    // λ₁,₂ = m ± R
    let mut out = [half * (dl[0] + dl[1]), T::zero(), half * (dl[0] + dl[1])];
    if r.as_f64() > 1e-12 * (a.abs() + c.abs()).as_f64().max(1e-300) {
        let dr = dl[0] - dl[1];
        out[0] += dr * x / (T::of(4.0) * r);
        out[2] -= dr * x / (T::of(4.0) * r);
        out[1] += dr * b / r;
        // ∂φ/∂θ through the axes and through nₖ
        let s = cov_n.a * u[0][0] * u[1][0]
            + cov_n.b * (u[0][0] * u[1][1] + u[0][1] * u[1][0])
            + cov_n.c * u[0][1] * u[1][1];
        let dtheta = (ratio[0] - ratio[1]) * (gm[0] * e[1] + gm[1] * e[0])
            + s * (ratio[0] * big_g[0] / n[0] - ratio[1] * big_g[1] / n[1]);
        out[0] -= dtheta * b / rr;
        out[2] += dtheta * b / rr;
        out[1] += dtheta * x / rr;
    }
    out
}

/// One contributor's state for Lagrangian flow at a pixel.
#[derive(Clone, Copy, Debug)]
pub struct FlowTerm<T> {
    pub weight: T,
    pub mean_t: [T; 2],
    pub cov_t: Sym2<T>,
    pub cov_next: Sym2<T>,
    /// Where `mean_t` moves to: `μ_{t+1}` for Gaussian flow, `μ_t + v̄Δt` for velocity flow.
    pub target: [T; 2],
}

/// `Σ wᵢ (p̂ᵢ − p)` with weights renormalized over usable contributors;
/// `None` when no contributor is usable.
pub fn lagrangian_flow_at<T: Real>(p: [T; 2], terms: &[FlowTerm<T>]) -> Option<[T; 2]> {
    let mut flow = [T::zero(); 2];
    let mut total = T::zero();
    for term in terms {
        let Some(st) = Stretch::new(&term.cov_t, &term.cov_next) else {
            continue;
        };
        let m = st.apply([p[0] - term.mean_t[0], p[1] - term.mean_t[1]]);
        for c in 0..2 {
            flow[c] += term.weight * (m[c] + term.target[c] - p[c]);
        }
        total += term.weight;
    }
    if !(total > T::zero()) {
        return None;
    }
    Some([flow[0] / total, flow[1] / total])
}

fn field_from_terms<T: Real>(
    width: usize,
    height: usize,
    topk: &[Vec<TopKEntry<T>>],
    term: impl Fn(&TopKEntry<T>) -> FlowTerm<T>,
) -> FlowField<T> {
    let mut out = FlowField::new(width, height);
    for y in 0..height {
        for x in 0..width {
            let entries = &topk[y * width + x];
            if entries.is_empty() {
                continue;
            }
            let terms: Vec<FlowTerm<T>> = entries.iter().map(&term).collect();
            if let Some(f) = lagrangian_flow_at([T::of(x as f64), T::of(y as f64)], &terms) {
                out.set(x, y, f);
            }
        }
    }
    out
}

/// Gaussian flow from the frame-`t` render and every particle's projection
/// at `t + 1` (rows indexed like the render's batch, projected with `cam_t`).
pub fn gaussian_flow<T: Real>(render_t: &RenderOutput<T>, next: &[crate::render::Projected<T>]) -> FlowField<T> {
    field_from_terms(render_t.width, render_t.height, &render_t.topk, |e| FlowTerm {
        weight: e.weight,
        mean_t: e.mean,
        cov_t: e.cov,
        cov_next: next[e.index].cov,
        target: next[e.index].mean,
    })
}

/// Velocity flow: like [`gaussian_flow`] but each mean advances by its
/// screen-space velocity `velocity_px[i]` times `dt`.
pub fn velocity_flow<T: Real>(
    render_t: &RenderOutput<T>,
    next: &[crate::render::Projected<T>],
    velocity_px: &[[T; 2]],
    dt: T,
) -> FlowField<T> {
    field_from_terms(render_t.width, render_t.height, &render_t.topk, |e| FlowTerm {
        weight: e.weight,
        mean_t: e.mean,
        cov_t: e.cov,
        cov_next: next[e.index].cov,
        target: [
            e.mean[0] + velocity_px[e.index][0] * dt,
            e.mean[1] + velocity_px[e.index][1] * dt,
        ],
    })
}

/// Screen-space velocity `J W v` of a world velocity at world position `x`.
pub fn project_velocity_at<T: Real>(cam: &Camera<T>, x: &Vec3<T>, v: &Vec3<T>) -> [T; 2] {
    let xc = cam.to_camera(x);
    let jac = cam.projection_jacobian(&xc);
    let vc = crate::geom::mat_vec(&cam.rotation, v);
    [
        jac[0][0] * vc[0] + jac[0][1] * vc[1] + jac[0][2] * vc[2],
        jac[1][0] * vc[0] + jac[1][1] * vc[1] + jac[1][2] * vc[2],
    ]
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LpfmValue<T> {
    pub loss: T,
    pub supervised: usize,
    /// Set when no pixel was supervised (the loss is then zero).
    pub empty: bool,
}

/// Mean over valid, masked pixels of `λ_g |f_g − f_gt|₁ + λ_v |f_v − f_gt|₁`.
/// Predicted flows that are invalid count as zero flow.
pub fn lpfm_loss<T: Real>(
    flow_g: &FlowField<T>,
    flow_v: &FlowField<T>,
    flow_gt: &FlowField<T>,
    mask: &MotionMask,
) -> Result<LpfmValue<T>, FlowError> {
    flow_g.same_size(flow_gt)?;
    flow_v.same_size(flow_gt)?;
    if mask.width != flow_gt.width || mask.height != flow_gt.height {
        return Err(FlowError::SizeMismatch("mask".into()));
    }
    let mut sum = T::zero();
    let mut n = 0usize;
    for i in 0..flow_gt.data.len() {
        if !(flow_gt.valid[i] && mask.data[i]) {
            continue;
        }
        let gt = flow_gt.data[i];
        let l1 = |f: &FlowField<T>| (f.data[i][0] - gt[0]).abs() + (f.data[i][1] - gt[1]).abs();
        sum += T::of(LAMBDA_G) * l1(flow_g) + T::of(LAMBDA_V) * l1(flow_v);
        n += 1;
    }
    if n == 0 {
        return Ok(LpfmValue {
            loss: T::zero(),
            supervised: 0,
            empty: true,
        });
    }
    Ok(LpfmValue {
        loss: sum / T::of(n as f64),
        supervised: n,
        empty: false,
    })
}

/// Per-pixel contributor list for the differentiable flow op.
#[derive(Clone, Debug)]
pub struct PixelTerms {
    pub pixel: [f64; 2],
    /// `(row, weight)` of the frame-`t` top-K.
    pub entries: Vec<(usize, f64)>,
}

struct LagrangianFlowOp<T> {
    pixels: Vec<PixelTerms>,
    _marker: std::marker::PhantomData<T>,
}

impl<T: Real> LagrangianFlowOp<T> {
    /// Usable contributors of pixel `k` with their renormalized weights.
    fn terms(&self, k: usize, proj_t: &Tensor<T>, proj_next: &Tensor<T>) -> Vec<(usize, T, Stretch<T>)> {
        let mut out = Vec::new();
        let mut total = T::zero();
        for &(i, w) in &self.pixels[k].entries {
            let rt = proj_t.row(i);
            let rn = proj_next.row(i);
            let ct = Sym2::new(rt[2], rt[3], rt[4]);
            let cn = Sym2::new(rn[2], rn[3], rn[4]);
            if let Some(st) = Stretch::new(&ct, &cn) {
                out.push((i, T::of(w), st));
                total += T::of(w);
            }
        }
        for e in &mut out {
            e.1 /= total;
        }
        out
    }
}

impl<T: Real> Backward<T> for LagrangianFlowOp<T> {
    fn name(&self) -> &'static str {
        "lagrangian_flow"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>, AdError> {
        let (pt, pn, tg) = (inputs[0], inputs[1], inputs[2]);
        let n = pt.rows();
        let mut gpt = vec![T::zero(); n * PROJ_COLS];
        let mut gpn = vec![T::zero(); n * PROJ_COLS];
        let mut gtg = vec![T::zero(); n * 2];
        let half = T::of(0.5);
        for k in 0..self.pixels.len() {
            let g = [grad.at(k, 0), grad.at(k, 1)];
            let p = self.pixels[k].pixel.map(T::of);
            for (i, w, st) in self.terms(k, pt, pn) {
                gtg[i * 2] += w * g[0];
                gtg[i * 2 + 1] += w * g[1];
                // d/dμ_t = −w M^T g (M symmetric)
                let mg = st.apply(g);
                gpt[i * PROJ_COLS] -= w * mg[0];
                gpt[i * PROJ_COLS + 1] -= w * mg[1];
                let d = [p[0] - pt.at(i, 0), p[1] - pt.at(i, 1)];
                let cov_t = Sym2::new(pt.at(i, 2), pt.at(i, 3), pt.at(i, 4));
                let cov_n = Sym2::new(pn.at(i, 2), pn.at(i, 3), pn.at(i, 4));
                let dc = stretch_cov_grad(&cov_t, &cov_n, d, g);
                for c in 0..3 {
                    gpt[i * PROJ_COLS + 2 + c] += w * dc[c];
                }
                for a in 0..2 {
                    let u = st.axes[a];
                    let e = u[0] * d[0] + u[1] * d[1];
                    let gu = u[0] * g[0] + u[1] * g[1];
                    let dr = w * e * gu;
                    let dl = dr * half / (st.lambda_next[a] * st.lambda_t[a]).sqrt();
                    gpn[i * PROJ_COLS + 2] += dl * u[0] * u[0];
                    gpn[i * PROJ_COLS + 3] += dl * T::of(2.0) * u[0] * u[1];
                    gpn[i * PROJ_COLS + 4] += dl * u[1] * u[1];
                }
            }
        }
        Ok(vec![
            Some(Tensor::new(pt.shape().to_vec(), gpt)?),
            Some(Tensor::new(pn.shape().to_vec(), gpn)?),
            Some(Tensor::new(tg.shape().to_vec(), gtg)?),
        ])
    }
}

/// Differentiable Lagrangian flow at the listed pixels: `[P, 2]`.
///
/// `proj_t` supplies the frame-`t` means and covariances (which fix the shared axes),
/// `proj_next` the frame-`t+1` covariances seen from the same camera, and
/// `target [N,2]` the destination of each mean. Pixels without usable
/// contributors yield zero flow.
pub fn lagrangian_flow<T: Real>(
    tape: &mut Tape<T>,
    pixels: Vec<PixelTerms>,
    proj_t: Var,
    proj_next: Var,
    target: Var,
) -> Result<Var, AdError> {
    let op = LagrangianFlowOp::<T> {
        pixels,
        _marker: std::marker::PhantomData,
    };
    let (pt, pn, tg) = (tape.value(proj_t), tape.value(proj_next), tape.value(target));
    if pt.cols() != PROJ_COLS || pn.shape() != pt.shape() || tg.cols() != 2 || tg.rows() != pt.rows() {
        return Err(AdError::ShapeMismatch(format!(
            "lagrangian_flow {:?} {:?} {:?}",
            pt.shape(),
            pn.shape(),
            tg.shape()
        )));
    }
    let mut out = Vec::with_capacity(op.pixels.len() * 2);
    for k in 0..op.pixels.len() {
        let p = op.pixels[k].pixel.map(T::of);
        let mut f = [T::zero(); 2];
        for (i, w, st) in op.terms(k, pt, pn) {
            let m = st.apply([p[0] - pt.at(i, 0), p[1] - pt.at(i, 1)]);
            for c in 0..2 {
                f[c] += w * (m[c] + tg.at(i, c) - p[c]);
            }
        }
        out.extend_from_slice(&f);
    }
    let value = Tensor::new(vec![op.pixels.len(), 2], out)?;
    tape.push(Box::new(op), &[proj_t, proj_next, target], value)
}
