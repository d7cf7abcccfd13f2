//! Deformation field: four 3-D hash grids over `(x,y,z)`, `(x,y,t)`,
//! `(y,z,t)`, `(x,z,t)`, directional attention, and a multi-head decoder
//! producing a rigid offset `(R_x, T_x)` plus orientation and scale updates.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ad::{AdError, Tape, Tensor, Var};
use crate::hashgrid::{self, GridLayout, HashGridConfig};
use crate::nn::{dense_init, zero_init, ParamSet};
use crate::ops3d::{normalize_rows, quat_rotate};
use crate::scalar::Real;
use crate::scene::SceneBounds;

/// Coordinate columns of the four grids within `(x, y, z, t)`.
pub const GRID_AXES: [[usize; 3]; 4] = [[0, 1, 2], [0, 1, 3], [1, 2, 3], [0, 2, 3]];

/// Width of the raw decoder output: `R_x` quaternion, `T_x`, `Δr`, `Δs`.
pub const HEAD_WIDTH: usize = 14;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeformConfig {
    pub spatial: HashGridConfig,
    /// Layout shared by the three space-time grids; the last axis is time.
    pub temporal: HashGridConfig,
    /// Output width of `f_s` and `f_t`.
    pub attention_width: usize,
    pub hidden: usize,
}

impl DeformConfig {
    /// Small grids suited to scenes of a few hundred particles.
    pub fn desk(frames: usize) -> Self {
        let tres = (frames / 2).max(2);
        Self {
            spatial: HashGridConfig::isotropic(3, 8, 4, 128, 14, 2),
            temporal: HashGridConfig {
                levels: 8,
                base_resolution: vec![4, 4, tres],
                max_resolution: vec![128, 128, tres],
                log2_table_size: 14,
                feature_dim: 2,
            },
            attention_width: 64,
            hidden: 256,
        }
    }

    /// Full-size encoder: 16 spatial levels 16→2048, 32 temporal levels, 2^19 tables.
    pub fn full(frames: usize) -> Self {
        let tres = (frames / 2).max(2);
        Self {
            spatial: HashGridConfig::isotropic(3, 16, 16, 2048, 19, 2),
            temporal: HashGridConfig {
                levels: 32,
                base_resolution: vec![16, 16, tres],
                max_resolution: vec![2048, 2048, tres],
                log2_table_size: 19,
                feature_dim: 2,
            },
            attention_width: 64,
            hidden: 256,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        self.spatial.validate().map_err(|e| format!("spatial grid: {e}"))?;
        self.temporal.validate().map_err(|e| format!("temporal grid: {e}"))?;
        if self.spatial.dims() != 3 || self.temporal.dims() != 3 {
            return Err("deformation grids must be 3-D".into());
        }
        if self.attention_width == 0 || self.hidden == 0 {
            return Err("deformation network widths must be positive".into());
        }
        Ok(())
    }
}

/// Parameter slots, in [`ParamSet`] order.
pub mod slot {
    pub const GRIDS: [usize; 4] = [0, 1, 2, 3];
    pub const FS_W: usize = 4;
    pub const FS_B: usize = 5;
    pub const FT_W: usize = 6;
    pub const FT_B: usize = 7;
    pub const D1_W: usize = 8;
    pub const D1_B: usize = 9;
    pub const D2_W: usize = 10;
    pub const D2_B: usize = 11;
}

#[derive(Clone, Debug)]
pub struct DeformationField<T: Real> {
    pub config: DeformConfig,
    pub spatial: Arc<GridLayout>,
    pub temporal: Arc<GridLayout>,
    pub params: ParamSet<T>,
}

/// Raw decoder heads for a batch of particles.
#[derive(Clone, Copy, Debug)]
pub struct DeformHeads {
    /// Normalized `R_x` quaternion `[N, 4]`.
    pub rx: Var,
    pub tx: Var,
    pub dr: Var,
    pub ds: Var,
}

/// Deformed pose for a batch: centers `[N,3]`, unit quaternions `[N,4]`, log-scales `[N,3]`.
#[derive(Clone, Copy, Debug)]
pub struct DeformedPose {
    pub mu: Var,
    pub q: Var,
    pub s: Var,
}

impl<T: Real> DeformationField<T> {
    pub fn new(config: DeformConfig, rng: &mut impl Rng) -> Result<Self, AdError> {
        config.validate().map_err(AdError::InvalidArgument)?;
        let spatial = Arc::new(GridLayout::new(&config.spatial)?);
        let temporal = Arc::new(GridLayout::new(&config.temporal)?);
        let mut params = ParamSet::new();
        params.push("grid_xyz", spatial.init_table(rng, 1e-4));
        for name in ["grid_xyt", "grid_yzt", "grid_xzt"] {
            params.push(name, temporal.init_table(rng, 1e-4));
        }
        let (w, b) = dense_init(rng, spatial.output_dim(), config.attention_width);
        params.push("fs_w", w);
        params.push("fs_b", b);
        let (w, b) = dense_init(rng, 3 * temporal.output_dim(), config.attention_width);
        params.push("ft_w", w);
        params.push("ft_b", b);
        let (w, b) = dense_init(rng, config.attention_width, config.hidden);
        params.push("dec1_w", w);
        params.push("dec1_b", b);
        let (w, b) = zero_init(config.hidden, HEAD_WIDTH);
        params.push("dec2_w", w);
        params.push("dec2_b", b);
        Ok(Self {
            config,
            spatial,
            temporal,
            params,
        })
    }

    pub fn is_grid_slot(slot: usize) -> bool {
        slot::GRIDS.contains(&slot)
    }

    /// Spatial feature `[N, Fs]` and concatenated temporal features `[N, 3 Ft]`
    /// at normalized points `coords: [N, 4]`.
    pub fn encode4d(&self, tape: &mut Tape<T>, vars: &[Var], coords: Var) -> Result<(Var, Var), AdError> {
        let s = hashgrid::encode(tape, &self.spatial, vars[slot::GRIDS[0]], coords, &GRID_AXES[0])?;
        let mut temporal = Vec::with_capacity(3);
        for g in 1..4 {
            temporal.push(hashgrid::encode(
                tape,
                &self.temporal,
                vars[slot::GRIDS[g]],
                coords,
                &GRID_AXES[g],
            )?);
        }
        Ok((s, tape.concat_cols(&temporal)?))
    }

    /// `h = (2σ(f_s(spatial)) − 1) ⊙ f_t(temporal)`.
    pub fn attend(&self, tape: &mut Tape<T>, vars: &[Var], spatial: Var, temporal: Var) -> Result<Var, AdError> {
        let fs = tape.affine(spatial, vars[slot::FS_W], vars[slot::FS_B])?;
        let fs = tape.relu(fs)?;
        let ft = tape.affine(temporal, vars[slot::FT_W], vars[slot::FT_B])?;
        let ft = tape.relu(ft)?;
        attention_modulate(tape, fs, ft)
    }

    pub fn decode(&self, tape: &mut Tape<T>, vars: &[Var], h: Var) -> Result<DeformHeads, AdError> {
        let z = tape.affine(h, vars[slot::D1_W], vars[slot::D1_B])?;
        let z = tape.relu(z)?;
        let out = tape.affine(z, vars[slot::D2_W], vars[slot::D2_B])?;
        let raw_rx = tape.slice_cols(out, 0, 4)?;
        let identity = tape.constant(Tensor::from_rows(&[[T::one(), T::zero(), T::zero(), T::zero()]]));
        let rx = tape.add(raw_rx, identity)?;
        let rx = normalize_rows(tape, rx)?;
        Ok(DeformHeads {
            rx,
            tx: tape.slice_cols(out, 4, 3)?,
            dr: tape.slice_cols(out, 7, 4)?,
            ds: tape.slice_cols(out, 11, 3)?,
        })
    }

    /// Normalized `[N, 4]` query points for world centers `mu` at time `t`,
    /// clamped into the unit box so escaped particles stay queryable.
    pub fn query_points(&self, tape: &mut Tape<T>, mu: Var, t: f64, bounds: &SceneBounds) -> Result<Var, AdError> {
        let n = tape.shape(mu)[0];
        let lo = tape.constant(Tensor::from_rows(&[bounds.lo.map(T::of)]));
        let ext = tape.constant(Tensor::from_rows(&[bounds.extent.map(T::of)]));
        let p = tape.sub(mu, lo)?;
        let p = tape.div(p, ext)?;
        let p = tape.clamp(p, 0.0, 1.0)?;
        let tcol = tape.constant(Tensor::filled(&[n, 1], T::of(t.clamp(0.0, 1.0))));
        tape.concat_cols(&[p, tcol])
    }

    /// Deformed poses of canonical `mu [N,3]`, `q [N,4]`, `s [N,3]` at time `t`.
    ///
    /// `μ′ = R_x μ + T_x`, `q′ = normalize(q + Δr)`, `s′ = s + Δs`. Rows with
    /// `dynamic[i] == false` return their canonical pose.
    #[allow(clippy::too_many_arguments)]
    pub fn deform(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        mu: Var,
        q: Var,
        s: Var,
        t: f64,
        bounds: &SceneBounds,
        dynamic: Option<&[bool]>,
    ) -> Result<DeformedPose, AdError> {
        let coords = self.query_points(tape, mu, t, bounds)?;
        let (sp, tm) = self.encode4d(tape, vars, coords)?;
        let h = self.attend(tape, vars, sp, tm)?;
        let heads = self.decode(tape, vars, h)?;
        let rotated = quat_rotate(tape, heads.rx, mu)?;
        let mu_d = tape.add(rotated, heads.tx)?;
        let q_d = tape.add(q, heads.dr)?;
        let q_d = normalize_rows(tape, q_d)?;
        let s_d = tape.add(s, heads.ds)?;
        match dynamic {
            None => Ok(DeformedPose { mu: mu_d, q: q_d, s: s_d }),
            Some(mask) => {
                let q_c = normalize_rows(tape, q)?;
                Ok(DeformedPose {
                    mu: blend_rows(tape, mask, mu_d, mu)?,
                    q: blend_rows(tape, mask, q_d, q_c)?,
                    s: blend_rows(tape, mask, s_d, s)?,
                })
            }
        }
    }
}

/// `(2σ(logits) − 1) ⊙ temporal`.
pub fn attention_modulate<T: Real>(tape: &mut Tape<T>, logits: Var, temporal: Var) -> Result<Var, AdError> {
    if tape.shape(logits) != tape.shape(temporal) {
        return Err(AdError::ShapeMismatch(format!(
            "attention logits {:?} vs temporal {:?}",
            tape.shape(logits),
            tape.shape(temporal)
        )));
    }
    let a = tape.sigmoid(logits)?;
    let a = tape.scale(a, 2.0)?;
    let a = tape.offset(a, -1.0)?;
    tape.mul(a, temporal)
}

/// Row-wise select: `mask[i] ? a[i] : b[i]`, with gradients routed accordingly.
pub fn blend_rows<T: Real>(tape: &mut Tape<T>, mask: &[bool], a: Var, b: Var) -> Result<Var, AdError> {
    let m: Vec<T> = mask.iter().map(|&d| if d { T::one() } else { T::zero() }).collect();
    let inv: Vec<T> = mask.iter().map(|&d| if d { T::zero() } else { T::one() }).collect();
    let m = tape.constant(Tensor::new(vec![mask.len(), 1], m)?);
    let inv = tape.constant(Tensor::new(vec![mask.len(), 1], inv)?);
    let x = tape.mul(a, m)?;
    let y = tape.mul(b, inv)?;
    tape.add(x, y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn field() -> DeformationField<f64> {
        let mut cfg = DeformConfig::desk(8);
        cfg.spatial = HashGridConfig::isotropic(3, 3, 4, 16, 10, 2);
        cfg.temporal = HashGridConfig {
            levels: 3,
            base_resolution: vec![4, 4, 4],
            max_resolution: vec![16, 16, 4],
            log2_table_size: 10,
            feature_dim: 2,
        };
        cfg.attention_width = 8;
        cfg.hidden = 16;
        DeformationField::new(cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap()
    }

    fn bounds() -> SceneBounds {
        SceneBounds {
            lo: [-1.0; 3],
            extent: [2.0; 3],
        }
    }

    #[test]
    fn zero_decoder_is_identity_at_every_time() {
        let f = field();
        let mu = Tensor::from_rows(&[[0.1, -0.2, 0.3], [0.5, 0.5, -0.5]]);
        let q = Tensor::from_rows(&[[1.0, 0.0, 0.0, 0.0], [0.8, 0.6, 0.0, 0.0]]);
        let s = Tensor::from_rows(&[[0.0, -1.0, 0.5], [0.2, 0.2, 0.2]]);
        for t in [0.0, 0.37, 1.0] {
            let mut tape = Tape::new();
            let vars = f.params.bind(&mut tape);
            let (m, qq, ss) = (tape.leaf(mu.clone()), tape.leaf(q.clone()), tape.leaf(s.clone()));
            let d = f.deform(&mut tape, &vars, m, qq, ss, t, &bounds(), None).unwrap();
            assert_eq!(tape.value(d.mu), &mu);
            assert_eq!(tape.value(d.q), &q);
            assert_eq!(tape.value(d.s), &s);
        }
    }

    #[test]
    fn hand_rotation_and_translation() {
        let mut f = field();
        // bias-only head: R_x = 90° about z, T_x = (1,0,0)
        let half = std::f64::consts::FRAC_PI_4;
        let b = f.params.get_mut(slot::D2_B);
        b.data_mut()[0] = half.cos() - 1.0;
        b.data_mut()[3] = half.sin();
        b.data_mut()[4] = 1.0;
        b.data_mut()[11] = 0.1;
        let mut tape = Tape::new();
        let vars = f.params.bind(&mut tape);
        let mu = tape.leaf(Tensor::from_rows(&[[1.0, 0.0, 0.0]]));
        let q = tape.leaf(Tensor::from_rows(&[[1.0, 0.0, 0.0, 0.0]]));
        let s = tape.leaf(Tensor::from_rows(&[[1.0, 1.0, 1.0]]));
        let d = f.deform(&mut tape, &vars, mu, q, s, 0.5, &bounds(), None).unwrap();
        let m = tape.value(d.mu).data();
        assert!((m[0] - 1.0).abs() < 1e-12 && (m[1] - 1.0).abs() < 1e-12 && m[2].abs() < 1e-12);
        assert_eq!(tape.value(d.s).data(), &[1.1, 1.0, 1.0]);
    }

    #[test]
    fn static_rows_keep_canonical_pose() {
        let mut f = field();
        f.params.get_mut(slot::D2_B).data_mut()[4] = 0.25;
        let mut tape = Tape::new();
        let vars = f.params.bind(&mut tape);
        let mu = tape.leaf(Tensor::from_rows(&[[0.0, 0.0, 0.0], [0.1, 0.1, 0.1]]));
        let q = tape.leaf(Tensor::from_rows(&[[1.0, 0.0, 0.0, 0.0]; 2]));
        let s = tape.leaf(Tensor::zeros(&[2, 3]));
        let d = f
            .deform(&mut tape, &vars, mu, q, s, 0.3, &bounds(), Some(&[true, false]))
            .unwrap();
        let m = tape.value(d.mu).data();
        assert_eq!(m[0], 0.25);
        assert_eq!(&m[3..], &[0.1, 0.1, 0.1]);
    }

    #[test]
    fn degenerate_quaternion_is_rejected() {
        let f = field();
        let mut tape = Tape::new();
        let vars = f.params.bind(&mut tape);
        let mu = tape.leaf(Tensor::from_rows(&[[0.0, 0.0, 0.0]]));
        let q = tape.leaf(Tensor::from_rows(&[[0.0, 0.0, 0.0, 0.0]]));
        let s = tape.leaf(Tensor::zeros(&[1, 3]));
        let err = f.deform(&mut tape, &vars, mu, q, s, 0.0, &bounds(), None).unwrap_err();
        assert!(matches!(err, AdError::DegenerateRotation(_)));
    }

    #[test]
    fn attention_of_zero_logits_is_zero() {
        let mut tape: Tape<f64> = Tape::new();
        let l = tape.constant(Tensor::zeros(&[2, 3]));
        let t = tape.constant(Tensor::filled(&[2, 3], 5.0));
        let h = attention_modulate(&mut tape, l, t).unwrap();
        assert!(tape.value(h).data().iter().all(|&v| v == 0.0));
        let big = tape.constant(Tensor::filled(&[1, 1], 20.0));
        let one = tape.constant(Tensor::filled(&[1, 1], 1.0));
        let h = attention_modulate(&mut tape, big, one).unwrap();
        let a = tape.value(h).item();
        assert!(a < 1.0 && a > 1.0 - 1e-8);
    }

    #[test]
    fn attention_matches_scalar_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let xs: Vec<f64> = (0..32).map(|_| rng.gen_range(-6.0..6.0)).collect();
        let mut tape: Tape<f64> = Tape::new();
        let l = tape.constant(Tensor::new(vec![4, 8], xs.clone()).unwrap());
        let one = tape.constant(Tensor::filled(&[4, 8], 1.0));
        let h = attention_modulate(&mut tape, l, one).unwrap();
        for (x, a) in xs.iter().zip(tape.value(h).data()) {
            let expect = 2.0 * (1.0 / (1.0 + (-x).exp())) - 1.0;
            assert!((a - expect).abs() < 1e-12);
            assert!(*a > -1.0 && *a < 1.0);
        }
    }

    #[test]
    fn encode4d_is_deterministic() {
        let f = field();
        let run = || {
            let mut tape = Tape::new();
            let vars = f.params.bind(&mut tape);
            let c = tape.constant(Tensor::from_rows(&[[0.3, 0.4, 0.5, 0.6]]));
            let (s, t) = f.encode4d(&mut tape, &vars, c).unwrap();
            (tape.value(s).clone(), tape.value(t).clone())
        };
        assert_eq!(run(), run());
    }
}
