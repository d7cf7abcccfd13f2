//! Time-evolving material field: per-particle velocity and Cauchy stress from
//! six feature planes, a Fourier time encoding and an index embedding.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ad::{AdError, Dual, Tape, Tensor, Var};
use crate::geom::Mat3;
use crate::hashgrid::{self, GridLayout, HashGridConfig};
use crate::nn::{dense_init, zero_init, ParamSet};
use crate::scalar::Real;

/// Coordinate pairs of the XZ, XY, YZ, XT, YT, ZT planes within `(x, y, z, t)`.
pub const PLANE_AXES: [[usize; 2]; 6] = [[0, 2], [0, 1], [1, 2], [0, 3], [1, 3], [2, 3]];

/// Stress components in packed order `(xx, yy, zz, xy, xz, yz)`.
pub const STRESS_COMPONENTS: usize = 6;

/// Packed index of stress entry `(i, j)`.
pub const fn stress_index(i: usize, j: usize) -> usize {
    const MAP: [[usize; 3]; 3] = [[0, 3, 4], [3, 1, 5], [4, 5, 2]];
    MAP[i][j]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaterialConfig {
    /// Layout shared by the six planes; `feature_dim` must be 1.
    pub plane: HashGridConfig,
    pub fourier_frequencies: usize,
    pub embedding_dim: usize,
    pub hidden: usize,
}

impl Default for MaterialConfig {
    fn default() -> Self {
        Self {
            plane: HashGridConfig::isotropic(2, 4, 8, 64, 16, 1),
            fourier_frequencies: 6,
            embedding_dim: 64,
            hidden: 256,
        }
    }
}

impl MaterialConfig {
    pub fn feature_len(&self) -> usize {
        6 + 2 * self.fourier_frequencies + self.embedding_dim
    }

    pub fn validate(&self) -> Result<(), String> {
        self.plane.validate().map_err(|e| format!("material plane: {e}"))?;
        if self.plane.dims() != 2 || self.plane.feature_dim != 1 {
            return Err("material planes must be 2-D with one feature per entry".into());
        }
        if self.hidden == 0 {
            return Err("material head width must be positive".into());
        }
        Ok(())
    }
}

pub mod slot {
    pub const PLANES: [usize; 6] = [0, 1, 2, 3, 4, 5];
    pub const EMBED: usize = 6;
    pub const H1_W: usize = 7;
    pub const H1_B: usize = 8;
    pub const H2_W: usize = 9;
    pub const H2_B: usize = 10;
}

#[derive(Clone, Debug)]
pub struct MaterialField<T: Real> {
    pub config: MaterialConfig,
    pub plane: Arc<GridLayout>,
    pub params: ParamSet<T>,
}

/// `(sin ω₁t, cos ω₁t, …, sin ωₙt, cos ωₙt)` with `ω_k = 2^{k−1} π`.
pub fn fourier_encode<T: Real>(t: T, n: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(2 * n);
    for k in 0..n {
        let w = T::PI() * T::of((1u64 << k) as f64);
        out.push((w * t).sin());
        out.push((w * t).cos());
    }
    out
}

/// Symmetric 3x3 matrix of packed stress `(xx, yy, zz, xy, xz, yz)`.
pub fn stress_to_matrix<T: Real>(s: &[T; 6]) -> Mat3<T> {
    [[s[0], s[3], s[4]], [s[3], s[1], s[5]], [s[4], s[5], s[2]]]
}

/// Velocity and packed stress of one query point.
pub type VelocityStress<T> = ([T; 3], [T; 6]);

impl<T: Real> MaterialField<T> {
    /// `particles` is the number of embedding rows (ids `0..particles`).
    pub fn new(config: MaterialConfig, particles: usize, rng: &mut impl Rng) -> Result<Self, AdError> {
        config.validate().map_err(AdError::InvalidArgument)?;
        let plane = Arc::new(GridLayout::new(&config.plane)?);
        let mut params = ParamSet::new();
        for name in ["plane_xz", "plane_xy", "plane_yz", "plane_xt", "plane_yt", "plane_zt"] {
            params.push(name, plane.init_table(rng, 1e-4));
        }
        let h = config.embedding_dim;
        let embed = (0..particles * h).map(|_| T::of(rng.gen_range(-0.1..=0.1))).collect();
        params.push("embedding", Tensor::new(vec![particles, h], embed)?);
        let (w, b) = dense_init(rng, config.feature_len(), config.hidden);
        params.push("head1_w", w);
        params.push("head1_b", b);
        let (w, b) = zero_init(config.hidden, 3 + STRESS_COMPONENTS);
        params.push("head2_w", w);
        params.push("head2_b", b);
        Ok(Self { config, plane, params })
    }

    pub fn embedding_rows(&self) -> usize {
        self.params.get(slot::EMBED).rows()
    }

    pub fn is_grid_slot(slot: usize) -> bool {
        slot::PLANES.contains(&slot)
    }

    fn rows_of(&self, ids: &[u64]) -> Result<Vec<usize>, AdError> {
        let n = self.embedding_rows() as u64;
        ids.iter()
            .map(|&id| {
                if id < n {
                    Ok(id as usize)
                } else {
                    Err(AdError::InvalidArgument(format!("unknown particle id {id} (embedding has {n} rows)")))
                }
            })
            .collect()
    }

    /// Feature `F = [F_hash, T(t), e_id]` at normalized points `[M, 4]`.
    ///
    /// With `tangents` the result carries its coordinate derivatives.
    pub fn featurize(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        points: &Tensor<T>,
        ids: &[u64],
        tangents: bool,
    ) -> Result<Dual, AdError> {
        if points.rows() != ids.len() {
            return Err(AdError::ShapeMismatch(format!(
                "{} points for {} ids",
                points.rows(),
                ids.len()
            )));
        }
        let rows = self.rows_of(ids)?;
        let m = points.rows();
        let levels = self.plane.levels.len();
        let ones = tape.constant(Tensor::filled(&[levels, 1], T::one()));
        let zero = tape.constant(Tensor::zeros(&[1]));
        let mut parts = Vec::with_capacity(8);
        let coords = if tangents {
            Dual::coordinates(tape, points)?
        } else {
            Dual::constant(tape.constant(points.clone()))
        };
        for (k, axes) in PLANE_AXES.iter().enumerate() {
            let table = vars[slot::PLANES[k]];
            let per_level = if tangents {
                hashgrid::encode_dual(tape, &self.plane, table, points, axes)?
            } else {
                Dual::constant(hashgrid::encode(tape, &self.plane, table, coords.value, axes)?)
            };
            parts.push(per_level.affine(tape, ones, zero)?);
        }
        let t = coords.slice_cols(tape, 3, 1)?;
        for k in 0..self.config.fourier_frequencies {
            let wt = t.scale(tape, std::f64::consts::PI * (1u64 << k) as f64)?;
            parts.push(wt.sin(tape)?);
            parts.push(wt.cos(tape)?);
        }
        let e = tape.gather_rows(vars[slot::EMBED], &rows)?;
        debug_assert_eq!(tape.shape(e), &[m, self.config.embedding_dim]);
        parts.push(Dual::constant(e));
        Dual::concat_cols(tape, &parts)
    }

    /// Velocity `[M,3]` and packed stress `[M,6]` from features.
    pub fn predict(&self, tape: &mut Tape<T>, vars: &[Var], f: &Dual) -> Result<(Dual, Dual), AdError> {
        let h = f.affine(tape, vars[slot::H1_W], vars[slot::H1_B])?;
        let h = h.relu(tape)?;
        let out = h.affine(tape, vars[slot::H2_W], vars[slot::H2_B])?;
        Ok((out.slice_cols(tape, 0, 3)?, out.slice_cols(tape, 3, STRESS_COMPONENTS)?))
    }

    /// Forward-only velocity and stress at normalized points.
    pub fn evaluate(&self, points: &Tensor<T>, ids: &[u64]) -> Result<Vec<VelocityStress<T>>, AdError> {
        let mut tape = Tape::new();
        let vars = self.params.bind_frozen(&mut tape);
        let f = self.featurize(&mut tape, &vars, points, ids, false)?;
        let (v, s) = self.predict(&mut tape, &vars, &f)?;
        let (v, s) = (tape.value(v.value), tape.value(s.value));
        Ok((0..points.rows())
            .map(|r| {
                let mut vv = [T::zero(); 3];
                vv.copy_from_slice(v.row(r));
                let mut ss = [T::zero(); 6];
                ss.copy_from_slice(s.row(r));
                (vv, ss)
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small(rows: usize) -> MaterialField<f64> {
        let cfg = MaterialConfig {
            plane: HashGridConfig::isotropic(2, 2, 4, 8, 8, 1),
            fourier_frequencies: 2,
            embedding_dim: 4,
            hidden: 8,
        };
        MaterialField::new(cfg, rows, &mut ChaCha8Rng::seed_from_u64(2)).unwrap()
    }

    #[test]
    fn fourier_at_zero() {
        assert_eq!(fourier_encode(0.0f64, 2), vec![0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn default_feature_length_is_82() {
        assert_eq!(MaterialConfig::default().feature_len(), 82);
    }

    #[test]
    fn features_differ_only_in_embedding() {
        let f = small(3);
        let mut tape = Tape::new();
        let vars = f.params.bind(&mut tape);
        let pts = Tensor::from_rows(&[[0.2, 0.3, 0.4, 0.5], [0.2, 0.3, 0.4, 0.5]]);
        let feat = f.featurize(&mut tape, &vars, &pts, &[0, 2], false).unwrap();
        let v = tape.value(feat.value);
        let n = f.config.feature_len();
        let head = n - f.config.embedding_dim;
        assert_eq!(v.row(0)[..head], v.row(1)[..head]);
        assert_ne!(v.row(0)[head..], v.row(1)[head..]);
        assert!(f.featurize(&mut tape, &vars, &pts, &[0, 3], false).is_err());
    }

    #[test]
    fn zero_head_predicts_rest() {
        let f = small(2);
        let out = f.evaluate(&Tensor::from_rows(&[[0.1, 0.9, 0.5, 0.3]]), &[1]).unwrap();
        assert_eq!(out[0], ([0.0; 3], [0.0; 6]));
    }

    #[test]
    fn stress_packing_is_symmetric() {
        let m = stress_to_matrix(&[1.0, 2.0, 3.0, 0.5, 0.0, 0.0]);
        assert_eq!(m, [[1.0, 0.5, 0.0], [0.5, 2.0, 0.0], [0.0, 0.0, 3.0]]);
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(stress_index(i, j), stress_index(j, i));
            }
        }
    }
}
