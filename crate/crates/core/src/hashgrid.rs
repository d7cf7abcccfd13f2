//! Multiresolution hashed feature grids.
//!
//! A grid over `D` of the input coordinates stores `L` levels whose per-axis
//! vertex counts grow geometrically from a base to a maximum resolution. A
//! level whose vertex count fits in the table is stored densely; otherwise
//! vertices are hashed by XOR of prime-multiplied integer coordinates.
//! Queries interpolate the `2^D` surrounding vertices (bi/trilinear) and
//! concatenate the per-level features.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ad::{check_unit_domain, AdError, Backward, Dual, Tape, Tensor, Var, AXES};
use crate::scalar::Real;

/// Per-axis hashing primes.
pub const PRIMES: [u32; 4] = [1, 2_654_435_761, 805_459_861, 3_674_653_429];

/// Hash of an integer vertex into a table of `table_size` rows.
pub fn hash_vertex(vertex: &[u32], table_size: usize) -> usize {
    let mut h: u32 = 0;
    for (v, p) in vertex.iter().zip(PRIMES) {
        h ^= v.wrapping_mul(p);
    }
    (h as usize) % table_size
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HashGridConfig {
    pub levels: usize,
    /// Vertex count per axis at the coarsest level.
    pub base_resolution: Vec<usize>,
    /// Vertex count per axis at the finest level.
    pub max_resolution: Vec<usize>,
    pub log2_table_size: u32,
    pub feature_dim: usize,
}

impl HashGridConfig {
    /// `levels` with an isotropic `base -> max` ladder over `dims` axes.
    pub fn isotropic(dims: usize, levels: usize, base: usize, max: usize, log2_table_size: u32, feature_dim: usize) -> Self {
        Self {
            levels,
            base_resolution: vec![base; dims],
            max_resolution: vec![max; dims],
            log2_table_size,
            feature_dim,
        }
    }

    pub fn dims(&self) -> usize {
        self.base_resolution.len()
    }

    pub fn validate(&self) -> Result<(), String> {
        let d = self.dims();
        if d == 0 || d > 4 {
            return Err(format!("grid must span 1..=4 axes, got {d}"));
        }
        if self.max_resolution.len() != d {
            return Err("base/max resolution lengths differ".into());
        }
        if self.levels == 0 {
            return Err("grid needs at least one level".into());
        }
        if self.feature_dim == 0 {
            return Err("feature_dim must be positive".into());
        }
        if self.log2_table_size == 0 || self.log2_table_size > 24 {
            return Err(format!("log2_table_size {} outside 1..=24", self.log2_table_size));
        }
        for (b, m) in self.base_resolution.iter().zip(&self.max_resolution) {
            if *b < 2 || m < b {
                return Err(format!("resolution ladder {b}->{m} invalid (need 2 <= base <= max)"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Level {
    pub resolution: Vec<usize>,
    pub offset: usize,
    pub size: usize,
    pub dense: bool,
}

/// Resolved level geometry and table layout.
#[derive(Clone, Debug, PartialEq)]
pub struct GridLayout {
    pub dims: usize,
    pub feature_dim: usize,
    pub table_size: usize,
    pub levels: Vec<Level>,
    pub rows: usize,
}

impl GridLayout {
    pub fn new(cfg: &HashGridConfig) -> Result<Self, AdError> {
        cfg.validate().map_err(AdError::InvalidArgument)?;
        let dims = cfg.dims();
        let table_size = 1usize << cfg.log2_table_size;
        let mut levels = Vec::with_capacity(cfg.levels);
        let mut offset = 0;
        for l in 0..cfg.levels {
            let frac = if cfg.levels == 1 {
                0.0
            } else {
                l as f64 / (cfg.levels - 1) as f64
            };
            let resolution: Vec<usize> = (0..dims)
                .map(|a| {
                    let b = cfg.base_resolution[a] as f64;
                    let m = cfg.max_resolution[a] as f64;
                    ((b * (m / b).powf(frac)).round() as usize).max(2)
                })
                .collect();
            let vertices = resolution
                .iter()
                .try_fold(1usize, |acc, &r| acc.checked_mul(r))
                .unwrap_or(usize::MAX);
            let dense = vertices <= table_size;
            let size = if dense { vertices } else { table_size };
            levels.push(Level {
                resolution,
                offset,
                size,
                dense,
            });
            offset += size;
        }
        Ok(Self {
            dims,
            feature_dim: cfg.feature_dim,
            table_size,
            levels,
            rows: offset,
        })
    }

    /// Learnable scalars held by the table.
    pub fn param_count(&self) -> usize {
        self.rows * self.feature_dim
    }

    /// Width of a query's concatenated output.
    pub fn output_dim(&self) -> usize {
        self.levels.len() * self.feature_dim
    }

    /// Table row of an integer vertex at `level`.
    pub fn vertex_row(&self, level: usize, vertex: &[u32]) -> usize {
        let lv = &self.levels[level];
        let local = if lv.dense {
            let mut idx = 0usize;
            let mut stride = 1usize;
            for (a, &v) in vertex.iter().enumerate() {
                idx += v as usize * stride;
                stride *= lv.resolution[a];
            }
            idx
        } else {
            hash_vertex(vertex, self.table_size)
        };
        lv.offset + local
    }

    /// Visits the `2^D` corners of the cell holding `p` at `level`.
    ///
    /// The callback receives the table row, the interpolation weight and the
    /// weight's partial derivatives with respect to each coordinate of `p`.
    pub fn corners<T: Real>(&self, level: usize, p: &[T], mut f: impl FnMut(usize, T, &[T; 4])) {
        let lv = &self.levels[level];
        let d = self.dims;
        let mut cell = [0u32; 4];
        let mut frac = [T::zero(); 4];
        let mut span = [T::zero(); 4];
        for a in 0..d {
            let n = lv.resolution[a];
            let s = T::of((n - 1) as f64);
            let pos = p[a] * s;
            let c = pos.floor().to_usize().unwrap_or(0).min(n - 2);
            cell[a] = c as u32;
            frac[a] = pos - T::of(c as f64);
            span[a] = s;
        }
        let mut vertex = [0u32; 4];
        for mask in 0..(1usize << d) {
            let mut w = T::one();
            for a in 0..d {
                let hi = mask >> a & 1 == 1;
                vertex[a] = cell[a] + hi as u32;
                w *= if hi { frac[a] } else { T::one() - frac[a] };
            }
            let mut dw = [T::zero(); 4];
            for a in 0..d {
                let mut g = span[a];
                if mask >> a & 1 == 0 {
                    g = -g;
                }
                for b in 0..d {
                    if b != a {
                        let hi = mask >> b & 1 == 1;
                        g *= if hi { frac[b] } else { T::one() - frac[b] };
                    }
                }
                dw[a] = g;
            }
            f(self.vertex_row(level, &vertex[..d]), w, &dw);
        }
    }

    /// Plain (non-tape) query of one point.
    pub fn query<T: Real>(&self, table: &Tensor<T>, p: &[T]) -> Result<Vec<T>, AdError> {
        check_unit_domain(p)?;
        let fd = self.feature_dim;
        let mut out = vec![T::zero(); self.output_dim()];
        for l in 0..self.levels.len() {
            self.corners(l, p, |row, w, _| {
                for k in 0..fd {
                    out[l * fd + k] += w * table.data()[row * fd + k];
                }
            });
        }
        Ok(out)
    }

    /// Random table with entries uniform in `[-scale, scale]`.
    pub fn init_table<T: Real>(&self, rng: &mut impl Rng, scale: f64) -> Tensor<T> {
        let data = (0..self.param_count())
            .map(|_| T::of(rng.gen_range(-scale..=scale)))
            .collect();
        Tensor::new(vec![self.rows, self.feature_dim], data).expect("layout size")
    }

    fn gather_points<T: Real>(coords: &Tensor<T>, axes: &[usize]) -> Result<Vec<[T; 4]>, AdError> {
        let cols = coords.cols();
        let mut pts = Vec::with_capacity(coords.rows());
        for r in 0..coords.rows() {
            let row = coords.row(r);
            let mut p = [T::zero(); 4];
            for (k, &a) in axes.iter().enumerate() {
                if a >= cols {
                    return Err(AdError::ShapeMismatch(format!("axis {a} of {cols}-column coordinates")));
                }
                p[k] = row[a];
            }
            check_unit_domain(&p[..axes.len()])?;
            pts.push(p);
        }
        Ok(pts)
    }
}

/// Counts of learnable entries for the four-grid decomposition versus one
/// dense 4-D grid, both at `n` vertices per axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncodingFootprint {
    pub decomposed: usize,
    pub monolithic: usize,
}

pub fn encoding_footprint(n: usize, feature_dim: usize) -> EncodingFootprint {
    let single = |dims: usize| {
        let cfg = HashGridConfig {
            levels: 1,
            base_resolution: vec![n; dims],
            max_resolution: vec![n; dims],
            log2_table_size: 24,
            feature_dim,
        };
        GridLayout::new(&cfg).expect("valid single-level layout")
    };
    let grid3 = single(3);
    debug_assert!(grid3.levels[0].dense);
    let decomposed = 4 * grid3.param_count();
    let monolithic = n.pow(4) * feature_dim;
    EncodingFootprint {
        decomposed,
        monolithic,
    }
}

struct EncodeOp {
    layout: Arc<GridLayout>,
    axes: Vec<usize>,
}

impl<T: Real> Backward<T> for EncodeOp {
    fn name(&self) -> &'static str {
        "grid_encode"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>, AdError> {
        let (table, coords) = (inputs[0], inputs[1]);
        let lay = &self.layout;
        let fd = lay.feature_dim;
        let width = lay.output_dim();
        let pts = GridLayout::gather_points(coords, &self.axes)?;
        let mut gt = vec![T::zero(); table.len()];
        let mut gc = vec![T::zero(); coords.len()];
        let ccols = coords.cols();
        for (r, p) in pts.iter().enumerate() {
            let g = &grad.data()[r * width..(r + 1) * width];
            let mut dp = [T::zero(); 4];
            for l in 0..lay.levels.len() {
                lay.corners(l, &p[..lay.dims], |row, w, dw| {
                    for k in 0..fd {
                        let gk = g[l * fd + k];
                        gt[row * fd + k] += w * gk;
                        let tv = table.data()[row * fd + k] * gk;
                        for a in 0..lay.dims {
                            dp[a] += dw[a] * tv;
                        }
                    }
                });
            }
            for (k, &a) in self.axes.iter().enumerate() {
                gc[r * ccols + a] += dp[k];
            }
        }
        Ok(vec![
            Some(Tensor::new(table.shape().to_vec(), gt)?),
            Some(Tensor::new(coords.shape().to_vec(), gc)?),
        ])
    }
}

struct SlopeOp {
    layout: Arc<GridLayout>,
    points: Vec<[f64; 4]>,
    axis: usize,
}

impl<T: Real> Backward<T> for SlopeOp {
    fn name(&self) -> &'static str {
        "grid_slope"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>, AdError> {
        let table = inputs[0];
        let lay = &self.layout;
        let fd = lay.feature_dim;
        let width = lay.output_dim();
        let mut gt = vec![T::zero(); table.len()];
        for (r, p) in self.points.iter().enumerate() {
            let p: Vec<T> = p[..lay.dims].iter().map(|&v| T::of(v)).collect();
            let g = &grad.data()[r * width..(r + 1) * width];
            for l in 0..lay.levels.len() {
                lay.corners(l, &p, |row, _, dw| {
                    for k in 0..fd {
                        gt[row * fd + k] += dw[self.axis] * g[l * fd + k];
                    }
                });
            }
        }
        Ok(vec![Some(Tensor::new(table.shape().to_vec(), gt)?)])
    }
}

/// Interpolates `table` at the `axes` columns of `coords`, differentiable in
/// both the table entries and the coordinates.
pub fn encode<T: Real>(
    tape: &mut Tape<T>,
    layout: &Arc<GridLayout>,
    table: Var,
    coords: Var,
    axes: &[usize],
) -> Result<Var, AdError> {
    if axes.len() != layout.dims {
        return Err(AdError::ShapeMismatch(format!(
            "{} axes for a {}-D grid",
            axes.len(),
            layout.dims
        )));
    }
    let tv = tape.value(table);
    if tv.len() != layout.param_count() {
        return Err(AdError::ShapeMismatch(format!(
            "table of {} values for layout of {}",
            tv.len(),
            layout.param_count()
        )));
    }
    let pts = GridLayout::gather_points(tape.value(coords), axes)?;
    let width = layout.output_dim();
    let fd = layout.feature_dim;
    let mut out = vec![T::zero(); pts.len() * width];
    for (r, p) in pts.iter().enumerate() {
        for l in 0..layout.levels.len() {
            layout.corners(l, &p[..layout.dims], |row, w, _| {
                for k in 0..fd {
                    out[r * width + l * fd + k] += w * tv.data()[row * fd + k];
                }
            });
        }
    }
    let value = Tensor::new(vec![pts.len(), width], out)?;
    tape.push(
        Box::new(EncodeOp {
            layout: layout.clone(),
            axes: axes.to_vec(),
        }),
        &[table, coords],
        value,
    )
}

/// Interpolated features and their coordinate tangents at constant points
/// `points: [M, 4]`; only the table receives gradients.
pub fn encode_dual<T: Real>(
    tape: &mut Tape<T>,
    layout: &Arc<GridLayout>,
    table: Var,
    points: &Tensor<T>,
    axes: &[usize],
) -> Result<Dual, AdError> {
    let coords = tape.constant(points.clone());
    let value = encode(tape, layout, table, coords, axes)?;
    let pts = GridLayout::gather_points(points, axes)?;
    let pts64: Vec<[f64; 4]> = pts
        .iter()
        .map(|p| [p[0].as_f64(), p[1].as_f64(), p[2].as_f64(), p[3].as_f64()])
        .collect();
    let width = layout.output_dim();
    let fd = layout.feature_dim;
    let mut tangents = [None; AXES];
    for (local, &axis) in axes.iter().enumerate() {
        let tv = tape.value(table);
        let mut out = vec![T::zero(); pts.len() * width];
        for (r, p) in pts.iter().enumerate() {
            for l in 0..layout.levels.len() {
                layout.corners(l, &p[..layout.dims], |row, _, dw| {
                    for k in 0..fd {
                        out[r * width + l * fd + k] += dw[local] * tv.data()[row * fd + k];
                    }
                });
            }
        }
        let value = Tensor::new(vec![pts.len(), width], out)?;
        let v = tape.push(
            Box::new(SlopeOp {
                layout: layout.clone(),
                points: pts64.clone(),
                axis: local,
            }),
            &[table],
            value,
        )?;
        tangents[axis] = Some(v);
    }
    Ok(Dual { value, tangents })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn layout(levels: usize, base: usize, max: usize, log2: u32) -> GridLayout {
        GridLayout::new(&HashGridConfig::isotropic(3, levels, base, max, log2, 2)).unwrap()
    }

    #[test]
    fn resolution_ladder_is_geometric() {
        let l = layout(16, 16, 2048, 19);
        assert_eq!(l.levels[0].resolution, vec![16; 3]);
        assert_eq!(l.levels[15].resolution, vec![2048; 3]);
        let r: Vec<f64> = l.levels.iter().map(|v| v.resolution[0] as f64).collect();
        let ratio = (2048.0f64 / 16.0).powf(1.0 / 15.0);
        for w in r.windows(2) {
            assert!((w[1] / w[0] - ratio).abs() < 0.08);
        }
    }

    #[test]
    fn dense_when_vertices_fit() {
        let l = layout(4, 8, 64, 12);
        assert!(l.levels[0].dense && l.levels[0].size == 512);
        assert!(!l.levels[3].dense && l.levels[3].size == 4096);
    }

    #[test]
    fn hash_of_vertex_matches_scalar_reimplementation() {
        // independent u64 arithmetic, truncated to 32 bits
        let v = [5u64, 7, 9];
        let h = (v[0] & 0xffff_ffff)
            ^ ((v[1] * 2_654_435_761) & 0xffff_ffff)
            ^ ((v[2] * 805_459_861) & 0xffff_ffff);
        let expected = (h % (1 << 12)) as usize;
        assert_eq!(hash_vertex(&[5, 7, 9], 1 << 12), expected);
        let l = layout(4, 8, 64, 12);
        assert_eq!(l.vertex_row(3, &[5, 7, 9]), l.levels[3].offset + expected);
    }

    #[test]
    fn vertex_query_returns_stored_entry() {
        let l = layout(1, 5, 5, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let table: Tensor<f64> = l.init_table(&mut rng, 1.0);
        // vertex (1, 2, 3) of a 5-vertex axis sits at 0.25, 0.5, 0.75
        let f = l.query(&table, &[0.25, 0.5, 0.75]).unwrap();
        let row = l.vertex_row(0, &[1, 2, 3]);
        assert_eq!(f, table.row(row).to_vec());
    }

    #[test]
    fn out_of_domain_query_rejected() {
        let l = layout(2, 4, 8, 10);
        let table: Tensor<f64> = Tensor::zeros(&[l.rows, 2]);
        assert!(l.query(&table, &[0.5, 1.01, 0.5]).is_err());
    }

    #[test]
    fn footprint_counts() {
        let f = encoding_footprint(16, 2);
        assert_eq!(f.decomposed, 4 * 16 * 16 * 16 * 2);
        assert_eq!(f.monolithic, 16usize.pow(4) * 2);
    }
}
