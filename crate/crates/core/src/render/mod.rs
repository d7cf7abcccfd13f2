//! Differentiable splatting: projection, view-dependent color and tiled
//! front-to-back compositing.

mod camera;
mod project;
mod raster;
mod sh;

use std::sync::Arc;

pub use camera::{Camera, CameraError};
pub use project::{project, project_one, project_velocity, Projected, DILATION, PROJ_COLS};
pub use raster::{composite, Layout, RasterSettings, CHANNELS, MAX_ALPHA, MIN_ALPHA, SUPPORT_Q};
pub use sh::sh_color;

use crate::ad::{AdError, Tape, Tensor, Var};
use crate::deform::DeformationField;
use crate::geom::Sym2;
use crate::scalar::Real;
use crate::scene::{CloudTensors, GaussianCloud, SceneBounds};

/// Particles at or closer than this view depth are culled.
pub const NEAR_PLANE: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RenderSettings {
    pub tile_size: usize,
    /// Contributors kept per pixel for flow.
    pub top_k: usize,
    pub background_depth: f64,
}

impl Default for RenderSettings {
    fn default() -> Self {
        Self {
            tile_size: 16,
            top_k: 8,
            background_depth: 0.0,
        }
    }
}

impl RenderSettings {
    pub fn raster<T>(&self, cam: &Camera<T>) -> RasterSettings {
        RasterSettings {
            width: cam.width,
            height: cam.height,
            tile_size: self.tile_size,
            background_depth: self.background_depth,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TopKEntry<T> {
    /// Row of the particle in the rendered batch.
    pub index: usize,
    pub id: u64,
    /// `αT / Σ αT` over all contributors of the pixel.
    pub weight: T,
    pub mean: [T; 2],
    pub cov: Sym2<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput<T> {
    pub width: usize,
    pub height: usize,
    /// Row-major RGB.
    pub color: Vec<[T; 3]>,
    pub depth: Vec<T>,
    pub transmittance: Vec<T>,
    pub topk: Vec<Vec<TopKEntry<T>>>,
    pub projected: Vec<Projected<T>>,
}

impl<T: Real> RenderOutput<T> {
    pub fn pixel(&self, x: usize, y: usize) -> [T; 3] {
        self.color[y * self.width + x]
    }

    /// Packs the frame from a composited image and its layout.
    pub fn assemble(image: &Tensor<T>, layout: &Layout<T>, proj: &Tensor<T>, ids: &[u64], top_k: usize) -> Self {
        let (height, width) = (image.shape()[0], image.shape()[1]);
        let data = image.data();
        let mut color = Vec::with_capacity(width * height);
        let mut depth = Vec::with_capacity(width * height);
        for p in 0..width * height {
            color.push([data[p * CHANNELS], data[p * CHANNELS + 1], data[p * CHANNELS + 2]]);
            depth.push(data[p * CHANNELS + 3]);
        }
        let projected: Vec<Projected<T>> = (0..proj.rows()).map(|i| Projected::from_row(proj.row(i))).collect();
        let (_, transmittance) = layout.render();
        let topk = layout
            .weights()
            .into_iter()
            .map(|list| {
                list.into_iter()
                    .take(top_k)
                    .map(|(i, w)| TopKEntry {
                        index: i,
                        id: ids[i],
                        weight: w,
                        mean: projected[i].mean,
                        cov: projected[i].cov,
                    })
                    .collect()
            })
            .collect();
        Self {
            width,
            height,
            color,
            depth,
            transmittance,
            topk,
            projected,
        }
    }
}

/// Tape nodes of one rendered frame.
pub struct Frame<T> {
    pub proj: Var,
    /// `[H, W, 4]`: RGB then depth.
    pub image: Var,
    pub layout: Arc<Layout<T>>,
}

/// Renders posed Gaussians: centers `mu [N,3]`, unit quaternions `q [N,4]`,
/// log-scales `s [N,3]`, SH `sh [N,12]`, opacity logits `opacity [N,1]`.
#[allow(clippy::too_many_arguments)]
pub fn render_pose<T: Real>(
    tape: &mut Tape<T>,
    cam: &Camera<T>,
    mu: Var,
    q: Var,
    s: Var,
    sh: Var,
    opacity: Var,
    ids: &[u64],
    settings: &RenderSettings,
) -> Result<Frame<T>, AdError> {
    let colors = sh_color(tape, sh, mu, cam.center())?;
    let alpha = tape.sigmoid(opacity)?;
    let proj = project(tape, cam, mu, q, s)?;
    let (image, layout) = composite(tape, proj, colors, alpha, ids, &settings.raster(cam))?;
    Ok(Frame { proj, image, layout })
}

/// Forward-only render of `cloud` at time `t`, deformed by `field` when given.
/// Particles flagged static keep their canonical pose.
pub fn render_cloud<T: Real>(
    cloud: &GaussianCloud<T>,
    field: Option<(&DeformationField<T>, &SceneBounds)>,
    cam: &Camera<T>,
    t: f64,
    settings: &RenderSettings,
) -> Result<RenderOutput<T>, AdError> {
    let mut tape = Tape::new();
    let ct = CloudTensors::from_cloud(cloud);
    let mu = tape.constant(ct.mu);
    let q = tape.constant(ct.q);
    let s = tape.constant(ct.log_scale);
    let sh = tape.constant(ct.sh);
    let op = tape.constant(ct.opacity);
    let (mu, q, s) = match field {
        Some((f, bounds)) if !cloud.is_empty() => {
            let vars = f.params.bind_frozen(&mut tape);
            let dynamic: Vec<bool> = cloud.particles.iter().map(|p| p.dynamic).collect();
            let pose = f.deform(&mut tape, &vars, mu, q, s, t, bounds, Some(&dynamic))?;
            (pose.mu, pose.q, pose.s)
        }
        _ => (mu, q, s),
    };
    let ids = cloud.ids();
    let frame = render_pose(&mut tape, cam, mu, q, s, sh, op, &ids, settings)?;
    Ok(RenderOutput::assemble(
        tape.value(frame.image),
        &frame.layout,
        tape.value(frame.proj),
        &ids,
        settings.top_k,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ad::gradient_check;
    use crate::geom;
    use crate::scene::GaussianParticle;

    fn axis_camera(w: usize, h: usize) -> Camera<f64> {
        Camera::new(
            [100.0, 100.0],
            [(w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0],
            geom::identity(),
            [0.0; 3],
            w,
            h,
        )
        .unwrap()
    }

    fn raster(w: usize, h: usize) -> RasterSettings {
        RasterSettings {
            width: w,
            height: h,
            tile_size: 4,
            background_depth: 0.0,
        }
    }

    fn row(u: f64, v: f64, var: f64, z: f64) -> [f64; 6] {
        [u, v, var, 0.0, var, z]
    }

    fn composite_values(rows: &[[f64; 6]], colors: &[[f64; 3]], opac: &[f64], w: usize, h: usize) -> Vec<f64> {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::from_rows(rows));
        let c = tape.constant(Tensor::from_rows(colors));
        let o = tape.constant(Tensor::new(vec![opac.len(), 1], opac.to_vec()).unwrap());
        let ids: Vec<u64> = (0..rows.len() as u64).collect();
        let (img, _) = composite(&mut tape, p, c, o, &ids, &raster(w, h)).unwrap();
        tape.value(img).data().to_vec()
    }

    #[test]
    fn on_axis_particle_projects_to_principal_point() {
        let cam = axis_camera(65, 65);
        let p = project_one(&cam, &[0.0, 0.0, 1.0], &[1.0, 0.0, 0.0, 0.0], &[-3.0; 3]);
        assert_eq!(p.mean, [32.0, 32.0]);
        let tiny = project_one(&cam, &[0.0, 0.0, 1.0], &[1.0, 0.0, 0.0, 0.0], &[-40.0; 3]);
        assert!((tiny.cov.a - DILATION).abs() < 1e-12 && (tiny.cov.c - DILATION).abs() < 1e-12);
    }

    #[test]
    fn single_contributor_at_center() {
        let img = composite_values(&[row(2.0, 2.0, 1.0, 3.0)], &[[1.0, 0.0, 0.0]], &[0.8], 5, 5);
        let p = (2 * 5 + 2) * CHANNELS;
        assert!((img[p] - 0.8).abs() < 1e-15);
        assert_eq!(img[p + 1], 0.0);
        assert!((img[p + 3] - 2.4).abs() < 1e-15);
    }

    #[test]
    fn two_half_alpha_contributors() {
        let img = composite_values(
            &[row(1.0, 1.0, 1.0, 1.0), row(1.0, 1.0, 1.0, 2.0)],
            &[[1.0; 3], [0.0; 3]],
            &[0.5, 0.5],
            3,
            3,
        );
        let p = (3 + 1) * CHANNELS;
        assert!((img[p] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn empty_scene_is_black_with_full_transmittance() {
        let cloud = crate::scene::GaussianCloud::<f64>::new();
        let out = render_cloud(&cloud, None, &axis_camera(8, 8), 0.0, &RenderSettings::default()).unwrap();
        assert!(out.color.iter().all(|c| *c == [0.0; 3]));
        assert!(out.transmittance.iter().all(|t| *t == 1.0));
    }

    #[test]
    fn storage_order_does_not_matter() {
        let rows = [row(3.0, 3.0, 4.0, 2.0), row(4.0, 2.0, 2.0, 1.0), row(2.0, 4.0, 3.0, 2.0)];
        let cols = [[0.9, 0.1, 0.2], [0.1, 0.8, 0.3], [0.4, 0.4, 0.9]];
        let op = [0.7, 0.6, 0.9];
        let a = composite_values(&rows, &cols, &op, 8, 8);
        // reversed storage with ids following the particles
        let mut tape = Tape::new();
        let rr: Vec<[f64; 6]> = rows.iter().rev().copied().collect();
        let cc: Vec<[f64; 3]> = cols.iter().rev().copied().collect();
        let p = tape.constant(Tensor::from_rows(&rr));
        let c = tape.constant(Tensor::from_rows(&cc));
        let o = tape.constant(Tensor::new(vec![3, 1], op.iter().rev().copied().collect()).unwrap());
        let (img, _) = composite(&mut tape, p, c, o, &[2, 1, 0], &raster(8, 8)).unwrap();
        assert_eq!(tape.value(img).data(), &a[..]);
    }

    #[test]
    fn transmittance_is_product_and_weights_sum_to_one() {
        let rows = [row(3.0, 3.0, 4.0, 2.0), row(4.0, 2.0, 2.0, 1.0), row(2.0, 4.0, 3.0, 3.0)];
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::from_rows(&rows));
        let c = tape.constant(Tensor::filled(&[3, 3], 0.5));
        let o = tape.constant(Tensor::new(vec![3, 1], vec![0.7, 0.6, 0.9]).unwrap());
        let (_, layout) = composite(&mut tape, p, c, o, &[0, 1, 2], &raster(8, 8)).unwrap();
        let (_, trans) = layout.render();
        for (px, list) in layout.weights().iter().enumerate() {
            if list.is_empty() {
                assert_eq!(trans[px], 1.0);
                continue;
            }
            let s: f64 = list.iter().map(|e| e.1).sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(list.windows(2).all(|w| w[0].1 >= w[1].1));
        }
    }

    #[test]
    fn composite_gradient_matches_differences() {
        let rows = vec![row(7.2, 7.9, 40.0, 2.0), row(8.6, 6.8, 30.0, 3.0)];
        let mut rows = Tensor::from_rows(&rows);
        rows.data_mut()[3] = 5.0;
        let cols = Tensor::from_rows(&[[0.9, 0.2, 0.4], [0.1, 0.7, 0.5]]);
        let op = Tensor::new(vec![2, 1], vec![0.6, 0.5]).unwrap();
        let rep = gradient_check(&[rows, cols, op], 1e-6, 1e-6, |tape, v| {
            let (img, _) = composite(tape, v[0], v[1], v[2], &[0, 1], &raster(16, 16))?;
            let w = tape.constant(Tensor::new(vec![16, 16, 4], (0..1024).map(|i| ((i * 7) % 13) as f64 / 13.0).collect())?);
            let y = tape.mul(img, w)?;
            tape.sum(y)
        })
        .unwrap();
        assert!(rep.max_rel_error < 1e-5, "{rep:?}");
    }

    #[test]
    fn projection_gradient_matches_differences() {
        let cam = Camera::look_at([0.4, -0.3, -3.0], [0.0, 0.1, 0.0], [0.0, 1.0, 0.0], 60.0, 32, 32).unwrap();
        let mu = Tensor::from_rows(&[[0.1, -0.2, 0.3], [-0.4, 0.2, 0.1]]);
        let q = Tensor::from_rows(&[geom::quat_normalize(&[0.9, 0.2, -0.3, 0.1]), geom::quat_normalize(&[0.5, -0.5, 0.4, 0.3])]);
        let s = Tensor::from_rows(&[[-2.0, -1.5, -2.5], [-1.0, -2.0, -1.8]]);
        let w = Tensor::new(vec![2, 6], vec![0.3, -0.7, 0.2, 0.9, -0.4, 1.1, -0.5, 0.6, 0.8, -0.3, 0.25, 0.7]).unwrap();
        let rep = gradient_check(&[mu, q, s], 1e-6, 1e-6, |tape, v| {
            let p = project(tape, &cam, v[0], v[1], v[2])?;
            let wc = tape.constant(w.clone());
            let y = tape.mul(p, wc)?;
            tape.sum(y)
        })
        .unwrap();
        assert!(rep.max_rel_error < 1e-5, "{rep:?}");
    }

    #[test]
    fn sh_gradient_matches_differences() {
        let mut sh = Tensor::zeros(&[2, 12]);
        for (i, v) in sh.data_mut().iter_mut().enumerate() {
            *v = ((i * 37 % 11) as f64 - 5.0) * 0.05;
        }
        let mu = Tensor::from_rows(&[[0.3, 0.1, 0.2], [-0.2, 0.4, -0.1]]);
        let rep = gradient_check(&[sh, mu], 1e-6, 1e-6, |tape, v| {
            let c = sh_color(tape, v[0], v[1], [0.0, 0.0, -3.0])?;
            let y = tape.square(c)?;
            tape.sum(y)
        })
        .unwrap();
        assert!(rep.max_rel_error < 1e-5, "{rep:?}");
    }

    #[test]
    fn identity_deformation_renders_identically_across_time() {
        use crate::deform::{DeformConfig, DeformationField};
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let mut cfg = DeformConfig::desk(6);
        cfg.hidden = 16;
        let field = DeformationField::new(cfg, &mut rng).unwrap();
        let mut cloud = crate::scene::GaussianCloud::new();
        cloud.insert(GaussianParticle::new([0.0, 0.0, 0.0], 0.2, [0.8, 0.3, 0.1], 0.9, 0));
        cloud.insert(GaussianParticle::new([0.3, 0.1, 0.2], 0.15, [0.1, 0.3, 0.9], 0.7, 0));
        let cam = Camera::look_at([0.0, 0.0, -3.0], [0.0; 3], [0.0, 1.0, 0.0], 40.0, 24, 24).unwrap();
        let b = crate::scene::SceneBounds::around(&[[-1.0; 3], [1.0; 3]], 0.0);
        let a = render_cloud(&cloud, Some((&field, &b)), &cam, 0.1, &RenderSettings::default()).unwrap();
        let c = render_cloud(&cloud, Some((&field, &b)), &cam, 0.9, &RenderSettings::default()).unwrap();
        assert_eq!(a.color, c.color);
        assert!(a.color.iter().any(|p| p[0] > 0.1));
    }
}
