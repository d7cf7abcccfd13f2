//! Front-to-back alpha compositing of projected Gaussians.
//!
//! Contributors are sorted once by `(depth, id, row)` and binned into square
//! tiles; each tile composites its pixels independently, so the result does
//! not depend on how tiles are scheduled across threads.

use std::cmp::Ordering;
use std::sync::Arc;

use rayon::prelude::*;

use crate::ad::{AdError, Backward, Tape, Tensor, Var};
use crate::geom::Sym2;
use crate::render::project::{Projected, PROJ_COLS};
use crate::scalar::Real;

/// Contributors weaker than this are skipped.
pub const MIN_ALPHA: f64 = 1.0 / 255.0;
/// Opacity ceiling per contributor.
pub const MAX_ALPHA: f64 = 0.99;
/// Squared Mahalanobis radius of the support (3σ).
pub const SUPPORT_Q: f64 = 9.0;
/// Channels of a composited pixel: RGB then depth.
pub const CHANNELS: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct RasterSettings {
    pub width: usize,
    pub height: usize,
    pub tile_size: usize,
    pub background_depth: f64,
}

#[derive(Clone, Copy, Debug)]
struct Splat<T> {
    mean: [T; 2],
    conic: Sym2<T>,
    depth: T,
    opacity: T,
    color: [T; 3],
    /// Inclusive pixel bounds `(x0, x1, y0, y1)`.
    bbox: (usize, usize, usize, usize),
}

#[derive(Clone, Copy, Debug)]
struct Hit<T> {
    alpha: T,
    g: T,
    w: [T; 2],
    clamped: bool,
}

impl<T: Real> Splat<T> {
    #[inline]
    fn hit(&self, px: usize, py: usize) -> Option<Hit<T>> {
        let d = [T::of(px as f64) - self.mean[0], T::of(py as f64) - self.mean[1]];
        let w = self.conic.apply(d);
        let q = d[0] * w[0] + d[1] * w[1];
        if !(q.as_f64() <= SUPPORT_Q) {
            return None;
        }
        let g = (-T::of(0.5) * q).exp();
        let a = self.opacity * g;
        if a.as_f64() < MIN_ALPHA {
            return None;
        }
        let clamped = a.as_f64() > MAX_ALPHA;
        Some(Hit {
            alpha: if clamped { T::of(MAX_ALPHA) } else { a },
            g,
            w,
            clamped,
        })
    }
}

/// `(pixel, rgb, depth, transmittance)`.
type Shaded<T> = (usize, [T; 3], T, T);
/// `(pixel, [(row, weight)])`.
type PixelWeights<T> = (usize, Vec<(usize, T)>);

/// Sorted, binned contributor set for one frame.
pub struct Layout<T> {
    splats: Vec<Splat<T>>,
    /// Row indices of visible splats in compositing order.
    order: Vec<usize>,
    /// Per tile: row indices in compositing order.
    tiles: Vec<Vec<usize>>,
    tiles_x: usize,
    settings: RasterSettings,
}

impl<T: Real> Layout<T> {
    pub fn new(
        proj: &Tensor<T>,
        colors: &Tensor<T>,
        opacity: &Tensor<T>,
        ids: &[u64],
        settings: &RasterSettings,
    ) -> Result<Self, AdError> {
        let n = proj.rows();
        if proj.cols() != PROJ_COLS || colors.len() != n * 3 || opacity.len() != n || ids.len() != n {
            return Err(AdError::ShapeMismatch(format!(
                "composite: proj {:?}, colors {:?}, opacity {:?}, {} ids",
                proj.shape(),
                colors.shape(),
                opacity.shape(),
                ids.len()
            )));
        }
        if settings.tile_size == 0 || settings.width == 0 || settings.height == 0 {
            return Err(AdError::InvalidArgument("empty raster or tile".into()));
        }
        let (w, h) = (settings.width, settings.height);
        let mut splats = Vec::with_capacity(n);
        let mut order = Vec::new();
        for i in 0..n {
            let p = Projected::from_row(proj.row(i));
            let det = p.cov.det();
            let ok = p.visible() && det.as_f64() > 0.0 && p.mean[0].is_finite() && p.mean[1].is_finite();
            let mut bbox = (1, 0, 1, 0);
            if ok {
                let rx = T::of(3.0) * p.cov.a.sqrt();
                let ry = T::of(3.0) * p.cov.c.sqrt();
                let x0 = (p.mean[0] - rx).floor().as_f64() - 1.0;
                let x1 = (p.mean[0] + rx).ceil().as_f64() + 1.0;
                let y0 = (p.mean[1] - ry).floor().as_f64() - 1.0;
                let y1 = (p.mean[1] + ry).ceil().as_f64() + 1.0;
                if x1 >= 0.0 && y1 >= 0.0 && x0 <= (w - 1) as f64 && y0 <= (h - 1) as f64 {
                    bbox = (
                        x0.max(0.0) as usize,
                        x1.min((w - 1) as f64) as usize,
                        y0.max(0.0) as usize,
                        y1.min((h - 1) as f64) as usize,
                    );
                    order.push(i);
                }
            }
            splats.push(Splat {
                mean: p.mean,
                conic: if ok { p.cov.inverse() } else { Sym2::identity() },
                depth: p.depth,
                opacity: opacity.data()[i],
                color: [colors.data()[i * 3], colors.data()[i * 3 + 1], colors.data()[i * 3 + 2]],
                bbox,
            });
        }
        order.sort_by(|&a, &b| {
            splats[a]
                .depth
                .partial_cmp(&splats[b].depth)
                .unwrap_or(Ordering::Equal)
                .then(ids[a].cmp(&ids[b]))
                .then(a.cmp(&b))
        });
        let ts = settings.tile_size;
        let tiles_x = w.div_ceil(ts);
        let tiles_y = h.div_ceil(ts);
        let mut tiles = vec![Vec::new(); tiles_x * tiles_y];
        for &i in &order {
            let (x0, x1, y0, y1) = splats[i].bbox;
            for ty in y0 / ts..=y1 / ts {
                for tx in x0 / ts..=x1 / ts {
                    tiles[ty * tiles_x + tx].push(i);
                }
            }
        }
        Ok(Self {
            splats,
            order,
            tiles,
            tiles_x,
            settings: settings.clone(),
        })
    }

    fn tile_pixels(&self, tile: usize) -> impl Iterator<Item = (usize, usize)> {
        let ts = self.settings.tile_size;
        let (tx, ty) = (tile % self.tiles_x, tile / self.tiles_x);
        let x1 = ((tx + 1) * ts).min(self.settings.width);
        let y1 = ((ty + 1) * ts).min(self.settings.height);
        (ty * ts..y1).flat_map(move |y| (tx * ts..x1).map(move |x| (x, y)))
    }

    /// Composites one pixel over `list`, calling `visit(row, alpha, T_before)`
    /// per contributor. Returns `(rgb, depth, T_final)`.
    fn pixel(
        &self,
        x: usize,
        y: usize,
        list: &[usize],
        mut visit: impl FnMut(usize, &Hit<T>, T),
    ) -> ([T; 3], T, T) {
        let mut rgb = [T::zero(); 3];
        let mut depth = T::zero();
        let mut trans = T::one();
        for &i in list {
            let s = &self.splats[i];
            let Some(hit) = s.hit(x, y) else { continue };
            let wgt = hit.alpha * trans;
            for c in 0..3 {
                rgb[c] += s.color[c] * wgt;
            }
            depth += s.depth * wgt;
            visit(i, &hit, trans);
            trans *= T::one() - hit.alpha;
        }
        depth += trans * T::of(self.settings.background_depth);
        (rgb, depth, trans)
    }

    /// Tiled, thread-parallel compositing: `[H*W*4]` values and final transmittance.
    pub fn render(&self) -> (Vec<T>, Vec<T>) {
        let (w, h) = (self.settings.width, self.settings.height);
        let per_tile: Vec<Vec<Shaded<T>>> = (0..self.tiles.len())
            .into_par_iter()
            .map(|t| {
                self.tile_pixels(t)
                    .map(|(x, y)| {
                        let (rgb, d, tr) = self.pixel(x, y, &self.tiles[t], |_, _, _| {});
                        (y * w + x, rgb, d, tr)
                    })
                    .collect()
            })
            .collect();
        let mut image = vec![T::zero(); w * h * CHANNELS];
        let mut trans = vec![T::one(); w * h];
        for tile in per_tile {
            for (p, rgb, d, tr) in tile {
                image[p * CHANNELS..p * CHANNELS + 3].copy_from_slice(&rgb);
                image[p * CHANNELS + 3] = d;
                trans[p] = tr;
            }
        }
        (image, trans)
    }

    /// Untiled reference: every pixel visits every visible splat in order.
    pub fn render_brute_force(&self) -> (Vec<T>, Vec<T>) {
        let (w, h) = (self.settings.width, self.settings.height);
        let mut image = vec![T::zero(); w * h * CHANNELS];
        let mut trans = vec![T::one(); w * h];
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                let (rgb, d, tr) = self.pixel(x, y, &self.order, |_, _, _| {});
                image[p * CHANNELS..p * CHANNELS + 3].copy_from_slice(&rgb);
                image[p * CHANNELS + 3] = d;
                trans[p] = tr;
            }
        }
        (image, trans)
    }

    /// Per-pixel contributors `(row, weight)` with weights `αT / Σ αT`,
    /// sorted by descending weight (ties by compositing order).
    pub fn weights(&self) -> Vec<Vec<(usize, T)>> {
        let w = self.settings.width;
        let per_tile: Vec<Vec<PixelWeights<T>>> = (0..self.tiles.len())
            .into_par_iter()
            .map(|t| {
                self.tile_pixels(t)
                    .map(|(x, y)| {
                        let mut list = Vec::new();
                        self.pixel(x, y, &self.tiles[t], |i, hit, tr| list.push((i, hit.alpha * tr)));
                        let total: T = list.iter().map(|e| e.1).sum();
                        for e in &mut list {
                            e.1 /= total;
                        }
                        // stable: equal weights keep compositing order
                        list.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal));
                        (y * w + x, list)
                    })
                    .collect()
            })
            .collect();
        let mut out = vec![Vec::new(); w * self.settings.height];
        for tile in per_tile {
            for (p, list) in tile {
                out[p] = list;
            }
        }
        out
    }

    /// Adjoints for `proj [N,6]`, `colors [N,3]`, `opacity [N]` given the
    /// image adjoint `grad [H*W*4]`.
    fn backward(&self, grad: &[T]) -> (Vec<T>, Vec<T>, Vec<T>) {
        let n = self.splats.len();
        let w = self.settings.width;
        let bg = T::of(self.settings.background_depth);
        // per tile: accumulators indexed by position in the tile list
        let per_tile: Vec<Vec<[T; 10]>> = (0..self.tiles.len())
            .into_par_iter()
            .map(|t| {
                let list = &self.tiles[t];
                let mut slot = vec![usize::MAX; 0];
                if !list.is_empty() {
                    slot = vec![usize::MAX; n];
                    for (k, &i) in list.iter().enumerate() {
                        slot[i] = k;
                    }
                }
                let mut acc = vec![[T::zero(); 10]; list.len()];
                let mut hits: Vec<(usize, Hit<T>, T)> = Vec::new();
                for (x, y) in self.tile_pixels(t) {
                    let p = y * w + x;
                    let gc = [grad[p * CHANNELS], grad[p * CHANNELS + 1], grad[p * CHANNELS + 2]];
                    let gd = grad[p * CHANNELS + 3];
                    if gc.iter().all(|v| *v == T::zero()) && gd == T::zero() {
                        continue;
                    }
                    hits.clear();
                    let (_, _, t_final) = self.pixel(x, y, list, |i, hit, tr| hits.push((i, *hit, tr)));
                    let mut tail = t_final * gd * bg;
                    for &(i, ref hit, tr) in hits.iter().rev() {
                        let s = &self.splats[i];
                        let a = &mut acc[slot[i]];
                        let wgt = hit.alpha * tr;
                        let e = gc[0] * s.color[0] + gc[1] * s.color[1] + gc[2] * s.color[2] + gd * s.depth;
                        let dalpha = tr * e - tail / (T::one() - hit.alpha);
                        tail += e * wgt;
                        for c in 0..3 {
                            a[6 + c] += gc[c] * wgt;
                        }
                        a[5] += gd * wgt;
                        if hit.clamped {
                            continue;
                        }
                        a[9] += dalpha * hit.g;
                        let dg = dalpha * s.opacity;
                        let gw = dg * hit.g;
                        a[0] += gw * hit.w[0];
                        a[1] += gw * hit.w[1];
                        let half = T::of(0.5);
                        a[2] += half * gw * hit.w[0] * hit.w[0];
                        a[3] += gw * hit.w[0] * hit.w[1];
                        a[4] += half * gw * hit.w[1] * hit.w[1];
                    }
                }
                acc
            })
            .collect();
        let mut gp = vec![T::zero(); n * PROJ_COLS];
        let mut gcol = vec![T::zero(); n * 3];
        let mut gop = vec![T::zero(); n];
        for (t, acc) in per_tile.iter().enumerate() {
            for (k, &i) in self.tiles[t].iter().enumerate() {
                let a = &acc[k];
                for c in 0..PROJ_COLS {
                    gp[i * PROJ_COLS + c] += a[c];
                }
                for c in 0..3 {
                    gcol[i * 3 + c] += a[6 + c];
                }
                gop[i] += a[9];
            }
        }
        (gp, gcol, gop)
    }
}

struct CompositeOp<T> {
    layout: Arc<Layout<T>>,
}

impl<T: Real> Backward<T> for CompositeOp<T> {
    fn name(&self) -> &'static str {
        "composite"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>, AdError> {
        let (gp, gc, go) = self.layout.backward(grad.data());
        Ok(vec![
            Some(Tensor::new(inputs[0].shape().to_vec(), gp)?),
            Some(Tensor::new(inputs[1].shape().to_vec(), gc)?),
            Some(Tensor::new(inputs[2].shape().to_vec(), go)?),
        ])
    }
}

/// Composites projected rows `proj [N,6]` with `colors [N,3]` and opacities
/// `opacity [N,1]` into an `[H, W, 4]` image (RGB, expected depth).
pub fn composite<T: Real>(
    tape: &mut Tape<T>,
    proj: Var,
    colors: Var,
    opacity: Var,
    ids: &[u64],
    settings: &RasterSettings,
) -> Result<(Var, Arc<Layout<T>>), AdError> {
    let layout = Arc::new(Layout::new(
        tape.value(proj),
        tape.value(colors),
        tape.value(opacity),
        ids,
        settings,
    )?);
    let (image, _) = layout.render();
    let value = Tensor::new(vec![settings.height, settings.width, CHANNELS], image)?;
    let var = tape.push(
        Box::new(CompositeOp {
            layout: layout.clone(),
        }),
        &[proj, colors, opacity],
        value,
    )?;
    Ok((var, layout))
}
