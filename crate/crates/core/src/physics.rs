//! Cauchy momentum residual, the CMR loss and closed-form constitutive laws.

use rand::seq::index::sample;
use rand::Rng;

use crate::ad::{AdError, Dual, Tape, Tensor, Var, AXES};
use crate::geom::Mat3;
use crate::material::{stress_index, MaterialField};
use crate::nn::ParamSet;
use crate::scalar::Real;
use crate::scene::SceneBounds;

#[derive(Debug, thiserror::Error)]
pub enum PhysicsError {
    #[error("residual loss needs at least one sample")]
    NoSamples,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("rigid constraint violated: strain norm {0:e}")]
    RigidViolation(f64),
    #[error(transparent)]
    Ad(#[from] AdError),
}

/// Affine map from normalized coordinates in `[0,1]^4` to world `(x, y, z, t)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Domain {
    pub lo: [f64; AXES],
    pub extent: [f64; AXES],
}

impl Domain {
    pub fn unit() -> Self {
        Self {
            lo: [0.0; AXES],
            extent: [1.0; AXES],
        }
    }

    pub fn new(bounds: &SceneBounds, t0: f64, duration: f64) -> Self {
        let b = bounds;
        Self {
            lo: [b.lo[0], b.lo[1], b.lo[2], t0],
            extent: [b.extent[0], b.extent[1], b.extent[2], duration],
        }
    }

    pub fn to_world(&self, p: &[f64]) -> [f64; AXES] {
        std::array::from_fn(|a| self.lo[a] + self.extent[a] * p[a])
    }

    pub fn to_unit(&self, w: &[f64]) -> [f64; AXES] {
        std::array::from_fn(|a| (w[a] - self.lo[a]) / self.extent[a])
    }

    /// World coordinate `axis` of normalized coordinates, as a dual column.
    pub fn world_coord<T: Real>(&self, tape: &mut Tape<T>, coords: &Dual, axis: usize) -> Result<Dual, AdError> {
        coords
            .slice_cols(tape, axis, 1)?
            .scale(tape, self.extent[axis])?
            .offset(tape, self.lo[axis])
    }
}

/// Anything that predicts velocity `[M,3]` and packed stress `[M,6]` as duals
/// in the normalized coordinates of `points`.
pub trait ContinuumField<T: Real> {
    fn params(&self) -> &ParamSet<T>;

    fn velocity_stress(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        points: &Tensor<T>,
        ids: &[u64],
    ) -> Result<(Dual, Dual), AdError>;
}

impl<T: Real> ContinuumField<T> for MaterialField<T> {
    fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    fn velocity_stress(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        points: &Tensor<T>,
        ids: &[u64],
    ) -> Result<(Dual, Dual), AdError> {
        let f = self.featurize(tape, vars, points, ids, true)?;
        self.predict(tape, vars, &f)
    }
}

/// Residual `r = inertial − divergence`, each `[M,3]`.
#[derive(Clone, Copy, Debug)]
pub struct MomentumResidual {
    pub inertial: Var,
    pub divergence: Var,
    pub r: Var,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ResidualOptions {
    pub density: f64,
    /// Drops the convective term `(v·∇)v` (small-amplitude linear theory).
    pub linearized: bool,
}

impl Default for ResidualOptions {
    fn default() -> Self {
        Self {
            density: 1.0,
            linearized: false,
        }
    }
}

fn tangent_or_zero<T: Real>(tape: &mut Tape<T>, d: &Dual, axis: usize) -> Var {
    match d.tangents[axis] {
        Some(t) => t,
        None => {
            let shape = tape.shape(d.value).to_vec();
            tape.constant(Tensor::zeros(&shape))
        }
    }
}

/// World-space partial derivative of `d` along `axis`.
fn partial<T: Real>(tape: &mut Tape<T>, d: &Dual, axis: usize, domain: &Domain) -> Result<Var, AdError> {
    let t = tangent_or_zero(tape, d, axis);
    tape.scale(t, 1.0 / domain.extent[axis])
}

/// `rⱼ = ρ(∂vⱼ/∂t + Σᵢ vᵢ ∂ᵢvⱼ) − Σᵢ ∂ᵢσᵢⱼ` with body forces omitted.
pub fn momentum_residual<T: Real>(
    tape: &mut Tape<T>,
    v: &Dual,
    sigma: &Dual,
    domain: &Domain,
    opts: ResidualOptions,
) -> Result<MomentumResidual, AdError> {
    let (vs, ss) = (tape.shape(v.value).to_vec(), tape.shape(sigma.value).to_vec());
    if vs.len() != 2 || vs[1] != 3 || ss.len() != 2 || ss[1] != 6 || vs[0] != ss[0] {
        return Err(AdError::ShapeMismatch(format!("residual of v {vs:?} and sigma {ss:?}")));
    }
    let mut inertial = partial(tape, v, 3, domain)?;
    if !opts.linearized {
        for i in 0..3 {
            let vi = tape.slice_cols(v.value, i, 1)?;
            let di = partial(tape, v, i, domain)?;
            let term = tape.mul(di, vi)?;
            inertial = tape.add(inertial, term)?;
        }
    }
    let inertial = tape.scale(inertial, opts.density)?;
    let ds: Vec<Var> = (0..3)
        .map(|i| partial(tape, sigma, i, domain))
        .collect::<Result<_, _>>()?;
    let mut cols = Vec::with_capacity(3);
    for j in 0..3 {
        let mut acc = tape.slice_cols(ds[0], stress_index(0, j), 1)?;
        for (i, &d) in ds.iter().enumerate().skip(1) {
            let c = tape.slice_cols(d, stress_index(i, j), 1)?;
            acc = tape.add(acc, c)?;
        }
        cols.push(acc);
    }
    let divergence = tape.concat_cols(&cols)?;
    let r = tape.sub(inertial, divergence)?;
    Ok(MomentumResidual {
        inertial,
        divergence,
        r,
    })
}

/// Query points for the residual; coordinates are normalized.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualSamples<T> {
    pub points: Tensor<T>,
    pub ids: Vec<u64>,
}

impl<T: Real> ResidualSamples<T> {
    pub fn new(points: Tensor<T>, ids: Vec<u64>) -> Result<Self, PhysicsError> {
        if points.shape().len() != 2 || points.cols() != AXES || points.rows() != ids.len() {
            return Err(PhysicsError::InvalidArgument(format!(
                "samples {:?} with {} ids",
                points.shape(),
                ids.len()
            )));
        }
        Ok(Self { points, ids })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn subset(&self, index: &[usize]) -> Self {
        let mut data = Vec::with_capacity(index.len() * AXES);
        for &i in index {
            data.extend_from_slice(self.points.row(i));
        }
        Self {
            points: Tensor::new(vec![index.len(), AXES], data).expect("subset shape"),
            ids: index.iter().map(|&i| self.ids[i]).collect(),
        }
    }
}

/// `(1/M) Σ ‖r‖²` over the rows of a residual.
pub fn cmr_loss<T: Real>(tape: &mut Tape<T>, r: Var) -> Result<Var, PhysicsError> {
    let m = tape.value(r).rows();
    if tape.value(r).is_empty() || m == 0 {
        return Err(PhysicsError::NoSamples);
    }
    let sq = tape.square(r)?;
    let s = tape.sum(sq)?;
    Ok(tape.scale(s, 1.0 / m as f64)?)
}

/// CMR of `field` at `samples` on an existing tape.
pub fn field_cmr<T: Real, F: ContinuumField<T> + ?Sized>(
    tape: &mut Tape<T>,
    vars: &[Var],
    field: &F,
    samples: &ResidualSamples<T>,
    domain: &Domain,
    opts: ResidualOptions,
) -> Result<Var, PhysicsError> {
    if samples.is_empty() {
        return Err(PhysicsError::NoSamples);
    }
    let (v, s) = field.velocity_stress(tape, vars, &samples.points, &samples.ids)?;
    let res = momentum_residual(tape, &v, &s, domain, opts)?;
    cmr_loss(tape, res.r)
}

#[derive(Clone, Debug)]
pub struct BlockCmr<T> {
    pub loss: T,
    /// One gradient per parameter slot of the field.
    pub grads: Vec<Tensor<T>>,
    pub blocks: usize,
    pub samples: usize,
}

/// Memory-bounded CMR: samples are ordered by particle id, cut into blocks of
/// `block_size`, and each block is differentiated on its own tape that is
/// dropped before the next one starts. Block losses are weighted by their
/// share of the samples. With `fraction < 1` a random subset of
/// `ceil(fraction·M)` samples is drawn first.
#[allow(clippy::too_many_arguments)]
pub fn block_sampled_cmr<T: Real, F: ContinuumField<T> + ?Sized>(
    field: &F,
    samples: &ResidualSamples<T>,
    domain: &Domain,
    opts: ResidualOptions,
    block_size: usize,
    fraction: f64,
    rng: &mut impl Rng,
) -> Result<BlockCmr<T>, PhysicsError> {
    if block_size == 0 {
        return Err(PhysicsError::InvalidArgument("block size must be at least 1".into()));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(PhysicsError::InvalidArgument(format!("sample fraction {fraction} outside (0, 1]")));
    }
    if samples.is_empty() {
        return Err(PhysicsError::NoSamples);
    }
    let total = samples.len();
    let mut index: Vec<usize> = if fraction < 1.0 {
        let k = ((fraction * total as f64).ceil() as usize).clamp(1, total);
        sample(rng, total, k).into_vec()
    } else {
        (0..total).collect()
    };
    index.sort_by_key(|&i| (samples.ids[i], i));
    let m = index.len();

    let params = field.params();
    let mut grads: Vec<Tensor<T>> = params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
    let mut loss = T::zero();
    let mut blocks = 0;
    for chunk in index.chunks(block_size) {
        let block = samples.subset(chunk);
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape);
        let part = field_cmr(&mut tape, &vars, field, &block, domain, opts)?;
        let weighted = tape.scale(part, chunk.len() as f64 / m as f64)?;
        let g = tape.backward(weighted)?;
        for (acc, &v) in grads.iter_mut().zip(&vars) {
            if let Some(t) = g.get(v) {
                acc.add_assign(t);
            }
        }
        loss += tape.value(weighted).item();
        blocks += 1;
    }
    Ok(BlockCmr {
        loss,
        grads,
        blocks,
        samples: m,
    })
}

/// Constitutive laws with closed-form stress.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ConstitutiveLaw {
    /// `σ = λ tr(e) I + 2μ e`.
    Elastic { lambda: f64, mu: f64 },
    /// `σ = −p I`.
    IdealFluid,
    /// `σ = −p I + 2η ė + ζ tr(ė) I`.
    ViscousFluid { eta: f64, zeta: f64 },
    /// Zero strain enforced; stress is the reaction `−p I`.
    Rigid { tolerance: f64 },
}

/// Kinematic state a law is evaluated at.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaterialState<T> {
    pub strain: Mat3<T>,
    pub strain_rate: Mat3<T>,
    pub pressure: T,
}

impl<T: Real> Default for MaterialState<T> {
    fn default() -> Self {
        Self {
            strain: [[T::zero(); 3]; 3],
            strain_rate: [[T::zero(); 3]; 3],
            pressure: T::zero(),
        }
    }
}

fn trace<T: Real>(m: &Mat3<T>) -> T {
    m[0][0] + m[1][1] + m[2][2]
}

fn frobenius<T: Real>(m: &Mat3<T>) -> T {
    m.iter().flatten().map(|&x| x * x).sum::<T>().sqrt()
}

pub fn oracle_stress<T: Real>(law: ConstitutiveLaw, state: &MaterialState<T>) -> Result<Mat3<T>, PhysicsError> {
    let mut s = [[T::zero(); 3]; 3];
    match law {
        ConstitutiveLaw::Elastic { lambda, mu } => {
            let tr = trace(&state.strain);
            for i in 0..3 {
                for j in 0..3 {
                    s[i][j] = T::of(2.0 * mu) * state.strain[i][j];
                }
                s[i][i] += T::of(lambda) * tr;
            }
        }
        ConstitutiveLaw::IdealFluid => {
            for (i, row) in s.iter_mut().enumerate() {
                row[i] = -state.pressure;
            }
        }
        ConstitutiveLaw::ViscousFluid { eta, zeta } => {
            let tr = trace(&state.strain_rate);
            for i in 0..3 {
                for j in 0..3 {
                    s[i][j] = T::of(2.0 * eta) * state.strain_rate[i][j];
                }
                s[i][i] += T::of(zeta) * tr - state.pressure;
            }
        }
        ConstitutiveLaw::Rigid { tolerance } => {
            let n = frobenius(&state.strain).as_f64();
            if n > tolerance {
                return Err(PhysicsError::RigidViolation(n));
            }
            for (i, row) in s.iter_mut().enumerate() {
                row[i] = -state.pressure;
            }
        }
    }
    Ok(s)
}

/// Traceless part `m − ⅓ tr(m) I`.
pub fn deviatoric<T: Real>(m: &Mat3<T>) -> Mat3<T> {
    let third = trace(m) / T::of(3.0);
    let mut out = *m;
    for (i, row) in out.iter_mut().enumerate() {
        row[i] -= third;
    }
    out
}

/// Hard-wired velocity/stress fields with known residuals, for verification.
pub mod analytic {
    use super::*;

    fn zeros_col<T: Real>(tape: &mut Tape<T>, m: usize) -> Dual {
        Dual::constant(tape.constant(Tensor::zeros(&[m, 1])))
    }

    fn const_cols<T: Real>(tape: &mut Tape<T>, m: usize, values: &[f64]) -> Dual {
        let mut data = Vec::with_capacity(m * values.len());
        for _ in 0..m {
            data.extend(values.iter().map(|&v| T::of(v)));
        }
        Dual::constant(tape.constant(Tensor::new(vec![m, values.len()], data).expect("shape")))
    }

    /// Isotropic packed stress `−p I` from a `[M,1]` pressure column.
    fn isotropic<T: Real>(tape: &mut Tape<T>, p: &Dual) -> Result<Dual, AdError> {
        let m = tape.shape(p.value)[0];
        let neg = p.neg(tape)?;
        let z = zeros_col(tape, m);
        Dual::concat_cols(tape, &[neg, neg, neg, z, z, z])
    }

    #[derive(Clone, Copy, Debug, PartialEq)]
    pub enum AnalyticField {
        /// Uniform velocity and uniform stress.
        Uniform { v: [f64; 3], sigma: [f64; 6] },
        /// `v = (γ y, 0, 0)` with constant stress.
        Shear { gamma: f64, sigma: [f64; 6] },
        /// At rest under pressure `p = p0 + g·x`; `r = ∇p`.
        Pressure { p0: f64, gradient: [f64; 3] },
        /// Rotation about the z axis through `center` at angular rate `omega`,
        /// balanced by the centripetal pressure `½ρω²|r⊥|²`.
        RigidRotation { omega: f64, center: [f64; 2], density: f64 },
        /// Longitudinal wave `v = A cos(k(x − ct)) ê_x` in a linear elastic
        /// solid with the matching stress; balanced only in linear theory.
        ElasticWave { amplitude: f64, k: f64, lambda: f64, mu: f64, density: f64 },
    }

    impl AnalyticField {
        pub fn wave_speed(lambda: f64, mu: f64, density: f64) -> f64 {
            ((lambda + 2.0 * mu) / density).sqrt()
        }

        pub fn eval<T: Real>(
            &self,
            tape: &mut Tape<T>,
            points: &Tensor<T>,
            domain: &Domain,
        ) -> Result<(Dual, Dual), AdError> {
            let m = points.rows();
            let coords = Dual::coordinates(tape, points)?;
            match *self {
                AnalyticField::Uniform { v, sigma } => Ok((const_cols(tape, m, &v), const_cols(tape, m, &sigma))),
                AnalyticField::Shear { gamma, sigma } => {
                    let y = domain.world_coord(tape, &coords, 1)?.scale(tape, gamma)?;
                    let z = zeros_col(tape, m);
                    let v = Dual::concat_cols(tape, &[y, z, z])?;
                    Ok((v, const_cols(tape, m, &sigma)))
                }
                AnalyticField::Pressure { p0, gradient } => {
                    let mut p = const_cols(tape, m, &[p0]);
                    for (a, &g) in gradient.iter().enumerate() {
                        let term = domain.world_coord(tape, &coords, a)?.scale(tape, g)?;
                        p = p.add(tape, &term)?;
                    }
                    let v = const_cols(tape, m, &[0.0; 3]);
                    Ok((v, isotropic(tape, &p)?))
                }
                AnalyticField::RigidRotation { omega, center, density } => {
                    let rx = domain.world_coord(tape, &coords, 0)?.offset(tape, -center[0])?;
                    let ry = domain.world_coord(tape, &coords, 1)?.offset(tape, -center[1])?;
                    let vx = ry.scale(tape, -omega)?;
                    let vy = rx.scale(tape, omega)?;
                    let z = zeros_col(tape, m);
                    let v = Dual::concat_cols(tape, &[vx, vy, z])?;
                    let r2 = rx.square(tape)?;
                    let ry2 = ry.square(tape)?;
                    let r2 = r2.add(tape, &ry2)?;
                    let p = r2.scale(tape, 0.5 * density * omega * omega)?;
                    Ok((v, isotropic(tape, &p)?))
                }
                AnalyticField::ElasticWave {
                    amplitude,
                    k,
                    lambda,
                    mu,
                    density,
                } => {
                    let c = Self::wave_speed(lambda, mu, density);
                    let x = domain.world_coord(tape, &coords, 0)?;
                    let t = domain.world_coord(tape, &coords, 3)?.scale(tape, c)?;
                    let phase = x.sub(tape, &t)?.scale(tape, k)?;
                    let cos = phase.cos(tape)?;
                    let vx = cos.scale(tape, amplitude)?;
                    let exx = cos.scale(tape, -amplitude / c)?;
                    let sxx = exx.scale(tape, lambda + 2.0 * mu)?;
                    let slat = exx.scale(tape, lambda)?;
                    let z = zeros_col(tape, m);
                    let v = Dual::concat_cols(tape, &[vx, z, z])?;
                    let s = Dual::concat_cols(tape, &[sxx, slat, slat, z, z, z])?;
                    Ok((v, s))
                }
            }
        }

        /// Residual options under which the field is an exact solution.
        pub fn balanced_options(&self) -> ResidualOptions {
            match *self {
                AnalyticField::RigidRotation { density, .. } => ResidualOptions {
                    density,
                    linearized: false,
                },
                AnalyticField::ElasticWave { density, .. } => ResidualOptions {
                    density,
                    linearized: true,
                },
                _ => ResidualOptions::default(),
            }
        }
    }

    /// An analytic field presented as a parameter-free continuum field.
    pub struct Fixed<T: Real> {
        pub field: AnalyticField,
        pub domain: Domain,
        empty: ParamSet<T>,
    }

    impl<T: Real> Fixed<T> {
        pub fn new(field: AnalyticField, domain: Domain) -> Self {
            Self {
                field,
                domain,
                empty: ParamSet::new(),
            }
        }
    }

    impl<T: Real> ContinuumField<T> for Fixed<T> {
        fn params(&self) -> &ParamSet<T> {
            &self.empty
        }

        fn velocity_stress(
            &self,
            tape: &mut Tape<T>,
            _vars: &[Var],
            points: &Tensor<T>,
            _ids: &[u64],
        ) -> Result<(Dual, Dual), AdError> {
            self.field.eval(tape, points, &self.domain)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::analytic::AnalyticField;
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn residual_rows(field: AnalyticField, pts: &Tensor<f64>, domain: &Domain) -> Vec<[f64; 3]> {
        let mut tape = Tape::new();
        let (v, s) = field.eval(&mut tape, pts, domain).unwrap();
        let res = momentum_residual(&mut tape, &v, &s, domain, field.balanced_options()).unwrap();
        let r = tape.value(res.r);
        (0..pts.rows()).map(|i| [r.at(i, 0), r.at(i, 1), r.at(i, 2)]).collect()
    }

    fn points(n: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * 4).map(|_| rng.gen_range(0.05..0.95)).collect();
        Tensor::new(vec![n, 4], data).unwrap()
    }

    #[test]
    fn hydrostatic_gradient_gives_unit_residual() {
        let d = Domain {
            lo: [-1.0, 0.0, 2.0, 0.0],
            extent: [3.0, 2.0, 1.0, 1.0],
        };
        let f = AnalyticField::Pressure {
            p0: 0.0,
            gradient: [1.0, 0.0, 0.0],
        };
        for r in residual_rows(f, &points(8, 1), &d) {
            assert!((r[0] - 1.0).abs() < 1e-12 && r[1].abs() < 1e-12 && r[2].abs() < 1e-12);
        }
    }

    #[test]
    fn shear_and_rotation_balance() {
        let d = Domain {
            lo: [-1.0; 4],
            extent: [2.0; 4],
        };
        let shear = AnalyticField::Shear {
            gamma: 0.7,
            sigma: [1.0, 2.0, 3.0, 0.1, 0.2, 0.3],
        };
        let rot = AnalyticField::RigidRotation {
            omega: 1.3,
            center: [0.2, -0.1],
            density: 1.0,
        };
        for f in [shear, rot] {
            for r in residual_rows(f, &points(16, 2), &d) {
                assert!(r.iter().all(|x| x.abs() < 1e-12), "{f:?}: {r:?}");
            }
        }
    }

    #[test]
    fn cmr_of_unit_residual_is_three() {
        let mut tape = Tape::<f64>::new();
        let r = tape.leaf(Tensor::from_rows(&[[1.0, 1.0, 1.0]]));
        let l = cmr_loss(&mut tape, r).unwrap();
        assert_eq!(tape.value(l).item(), 3.0);
        let empty = tape.leaf(Tensor::zeros(&[0, 3]));
        assert!(matches!(cmr_loss(&mut tape, empty), Err(PhysicsError::NoSamples)));
    }

    #[test]
    fn residual_is_linear_in_stress() {
        let d = Domain::unit();
        let pts = points(5, 3);
        let eval = |scale: f64| {
            let mut tape = Tape::new();
            let f = AnalyticField::Pressure {
                p0: 0.3,
                gradient: [0.5 * scale, -scale, 2.0 * scale],
            };
            let (v, s) = f.eval(&mut tape, &pts, &d).unwrap();
            let res = momentum_residual(&mut tape, &v, &s, &d, ResidualOptions::default()).unwrap();
            tape.value(res.r).clone()
        };
        let (a, b) = (eval(1.0), eval(2.5));
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((2.5 * x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn elastic_law_example() {
        let mut st = MaterialState::<f64>::default();
        st.strain[0][0] = 0.01;
        let s = oracle_stress(ConstitutiveLaw::Elastic { lambda: 1.0, mu: 1.0 }, &st).unwrap();
        let want = [0.03, 0.01, 0.01];
        for i in 0..3 {
            for j in 0..3 {
                let w = if i == j { want[i] } else { 0.0 };
                assert!((s[i][j] - w).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn fluid_laws() {
        let st = MaterialState {
            pressure: 5.0,
            ..Default::default()
        };
        let ideal = oracle_stress(ConstitutiveLaw::IdealFluid, &st).unwrap();
        assert_eq!(ideal, [[-5.0, 0.0, 0.0], [0.0, -5.0, 0.0], [0.0, 0.0, -5.0]]);
        let visc = oracle_stress(ConstitutiveLaw::ViscousFluid { eta: 0.3, zeta: 0.1 }, &st).unwrap();
        assert_eq!(visc, ideal);
        let mut bent = st;
        bent.strain[0][1] = 0.1;
        assert!(matches!(
            oracle_stress(ConstitutiveLaw::Rigid { tolerance: 1e-9 }, &bent),
            Err(PhysicsError::RigidViolation(_))
        ));
        assert_eq!(oracle_stress(ConstitutiveLaw::Rigid { tolerance: 1e-9 }, &st).unwrap(), ideal);
    }

    #[test]
    fn deviatoric_is_traceless() {
        let d: Mat3<f64> = deviatoric(&[[1.0, 2.0, 0.0], [2.0, 5.0, 1.0], [0.0, 1.0, -3.0]]);
        assert!(trace(&d).abs() < 1e-15);
        assert_eq!(d[0][1], 2.0);
    }
}
