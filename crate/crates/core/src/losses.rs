//! Photometric losses, loss weighting and image metrics.

use serde::{Deserialize, Serialize};

use crate::ad::{AdError, Backward, Tape, Tensor, Var};
use crate::image::Image;
use crate::scalar::Real;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
/// Reported PSNR when the images are identical.
pub const PSNR_CAP: f64 = 99.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_c: f64,
    pub lambda_cmr: f64,
    pub lambda_lpfm: f64,
    pub lambda_g: f64,
    pub lambda_v: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_c: 0.2,
            lambda_cmr: 0.1,
            lambda_lpfm: 0.01,
            lambda_g: 0.5,
            lambda_v: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), String> {
        let all = [
            ("lambda_c", self.lambda_c),
            ("lambda_cmr", self.lambda_cmr),
            ("lambda_lpfm", self.lambda_lpfm),
            ("lambda_g", self.lambda_g),
            ("lambda_v", self.lambda_v),
        ];
        for (name, v) in all {
            if !(v.is_finite() && v >= 0.0) {
                return Err(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        if self.lambda_c > 1.0 {
            return Err(format!("lambda_c must not exceed 1, got {}", self.lambda_c));
        }
        Ok(())
    }

    /// `renders + λ_CMR·cmr + λ_LPFM·lpfm`; absent terms count as zero.
    pub fn combine(&self, renders: f64, cmr: Option<f64>, lpfm: Option<f64>) -> Result<f64, LossError> {
        let named = [("renders", Some(renders)), ("cmr", cmr), ("lpfm", lpfm)];
        for (name, v) in named {
            if let Some(v) = v {
                if !v.is_finite() {
                    return Err(LossError::NonFinite(name));
                }
            }
        }
        Ok(renders + self.lambda_cmr * cmr.unwrap_or(0.0) + self.lambda_lpfm * lpfm.unwrap_or(0.0))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum LossError {
    #[error("image size mismatch: {0}")]
    Dimensions(String),
    #[error("loss term `{0}` is not finite")]
    NonFinite(&'static str),
    #[error(transparent)]
    Ad(#[from] AdError),
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let c = (SSIM_WINDOW / 2) as f64;
    let mut k = [0.0; SSIM_WINDOW];
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Separable "valid" Gaussian filtering of one `h × w` plane.
struct Blur<T> {
    k: [T; SSIM_WINDOW],
    h: usize,
    w: usize,
}

impl<T: Real> Blur<T> {
    fn new(h: usize, w: usize) -> Self {
        Self {
            k: gaussian_kernel().map(T::of),
            h,
            w,
        }
    }

    fn out_dims(&self) -> (usize, usize) {
        (self.h + 1 - SSIM_WINDOW, self.w + 1 - SSIM_WINDOW)
    }

    fn apply(&self, plane: &[T]) -> Vec<T> {
        let (oh, ow) = self.out_dims();
        let mut tmp = vec![T::zero(); self.h * ow];
        for y in 0..self.h {
            for x in 0..ow {
                let mut acc = T::zero();
                for (a, &k) in self.k.iter().enumerate() {
                    acc += k * plane[y * self.w + x + a];
                }
                tmp[y * ow + x] = acc;
            }
        }
        let mut out = vec![T::zero(); oh * ow];
        for y in 0..oh {
            for x in 0..ow {
                let mut acc = T::zero();
                for (a, &k) in self.k.iter().enumerate() {
                    acc += k * tmp[(y + a) * ow + x];
                }
                out[y * ow + x] = acc;
            }
        }
        out
    }

    /// Adjoint of [`Blur::apply`].
    fn adjoint(&self, g: &[T]) -> Vec<T> {
        let (oh, ow) = self.out_dims();
        let mut tmp = vec![T::zero(); self.h * ow];
        for y in 0..oh {
            for x in 0..ow {
                let v = g[y * ow + x];
                for (a, &k) in self.k.iter().enumerate() {
                    tmp[(y + a) * ow + x] += k * v;
                }
            }
        }
        let mut out = vec![T::zero(); self.h * self.w];
        for y in 0..self.h {
            for x in 0..ow {
                let v = tmp[y * ow + x];
                for (a, &k) in self.k.iter().enumerate() {
                    out[y * self.w + x + a] += k * v;
                }
            }
        }
        out
    }
}

fn channel_plane<T: Real>(data: &[T], channels: usize, c: usize) -> Vec<T> {
    data.iter().skip(c).step_by(channels).copied().collect()
}

/// Mean SSIM over all channels and valid window positions; with `want_grad`
/// also its gradient with respect to `x`.
fn ssim_core<T: Real>(x: &[T], y: &[T], h: usize, w: usize, channels: usize, want_grad: bool) -> (T, Option<Vec<T>>) {
    let blur = Blur::<T>::new(h, w);
    let (oh, ow) = blur.out_dims();
    let n = T::of((oh * ow * channels) as f64);
    let (c1, c2) = (T::of(SSIM_C1), T::of(SSIM_C2));
    let two = T::of(2.0);
    let mut total = T::zero();
    let mut grad = want_grad.then(|| vec![T::zero(); h * w * channels]);
    for c in 0..channels {
        let xp = channel_plane(x, channels, c);
        let yp = channel_plane(y, channels, c);
        let xx: Vec<T> = xp.iter().map(|v| *v * *v).collect();
        let yy: Vec<T> = yp.iter().map(|v| *v * *v).collect();
        let xy: Vec<T> = xp.iter().zip(&yp).map(|(a, b)| *a * *b).collect();
        let (mx, my) = (blur.apply(&xp), blur.apply(&yp));
        let (exx, eyy, exy) = (blur.apply(&xx), blur.apply(&yy), blur.apply(&xy));
        let m = oh * ow;
        let (mut dmx, mut dexx, mut dexy) = (vec![T::zero(); m], vec![T::zero(); m], vec![T::zero(); m]);
        for i in 0..m {
            let (ux, uy) = (mx[i], my[i]);
            let a1 = two * ux * uy + c1;
            let a2 = two * (exy[i] - ux * uy) + c2;
            let b1 = ux * ux + uy * uy + c1;
            let b2 = (exx[i] - ux * ux) + (eyy[i] - uy * uy) + c2;
            let s = a1 * a2 / (b1 * b2);
            total += s;
            if want_grad {
                let scale = s / n;
                dmx[i] = scale * (two * uy / a1 - two * uy / a2 - two * ux / b1 + two * ux / b2);
                dexx[i] = -scale / b2;
                dexy[i] = scale * two / a2;
            }
        }
        if let Some(g) = grad.as_mut() {
            let (gm, gxx, gxy) = (blur.adjoint(&dmx), blur.adjoint(&dexx), blur.adjoint(&dexy));
            for p in 0..h * w {
                g[p * channels + c] = gm[p] + two * xp[p] * gxx[p] + yp[p] * gxy[p];
            }
        }
    }
    (total / n, grad)
}

fn image_dims<T: Real>(t: &Tensor<T>) -> Result<(usize, usize, usize), LossError> {
    match *t.shape() {
        [h, w, c] => Ok((h, w, c)),
        ref s => Err(LossError::Dimensions(format!("expected [H, W, C], got {s:?}"))),
    }
}

struct SsimOp<T> {
    target: Tensor<T>,
}

impl<T: Real> Backward<T> for SsimOp<T> {
    fn name(&self) -> &'static str {
        "ssim"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>, AdError> {
        let x = inputs[0];
        let [h, w, c] = *x.shape() else { unreachable!() };
        let (_, g) = ssim_core(x.data(), self.target.data(), h, w, c, true);
        let up = grad.item();
        let g = g.expect("gradient requested").into_iter().map(|v| v * up).collect();
        Ok(vec![Some(Tensor::new(x.shape().to_vec(), g)?)])
    }
}

/// Differentiable mean SSIM of `x: [H, W, C]` against a constant target.
pub fn ssim<T: Real>(tape: &mut Tape<T>, x: Var, target: &Tensor<T>) -> Result<Var, LossError> {
    let xv = tape.value(x);
    let (h, w, c) = image_dims(xv)?;
    if xv.shape() != target.shape() {
        return Err(LossError::Dimensions(format!("{:?} vs {:?}", xv.shape(), target.shape())));
    }
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(LossError::Dimensions(format!(
            "{w}x{h} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )));
    }
    let (s, _) = ssim_core(xv.data(), target.data(), h, w, c, false);
    let op = SsimOp { target: target.clone() };
    Ok(tape.push(Box::new(op), &[x], Tensor::scalar(s))?)
}

/// `(1 − SSIM) / 2`.
pub fn dssim<T: Real>(tape: &mut Tape<T>, x: Var, target: &Tensor<T>) -> Result<Var, LossError> {
    let s = ssim(tape, x, target)?;
    let half = tape.scale(s, -0.5)?;
    Ok(tape.offset(half, 0.5)?)
}

/// Mean absolute error against a constant target.
pub fn l1<T: Real>(tape: &mut Tape<T>, x: Var, target: &Tensor<T>) -> Result<Var, LossError> {
    if tape.shape(x) != target.shape() {
        return Err(LossError::Dimensions(format!("{:?} vs {:?}", tape.shape(x), target.shape())));
    }
    let t = tape.constant(target.clone());
    let d = tape.sub(x, t)?;
    let a = tape.abs(d)?;
    Ok(tape.mean(a)?)
}

/// RGB channels `[H, W, 3]` of a composited `[H, W, 4]` frame.
pub fn rgb_of<T: Real>(tape: &mut Tape<T>, frame: Var) -> Result<Var, AdError> {
    let shape = tape.shape(frame).to_vec();
    let [h, w, c] = shape[..] else {
        return Err(AdError::ShapeMismatch(format!("frame {shape:?}")));
    };
    let flat = tape.reshape(frame, &[h * w, c])?;
    let rgb = tape.slice_cols(flat, 0, 3)?;
    tape.reshape(rgb, &[h, w, 3])
}

#[derive(Clone, Copy, Debug)]
pub struct RendersLoss {
    pub l1: Var,
    pub dssim: Var,
    pub total: Var,
}

/// `(1 − λ_c)·L1 + λ_c·D-SSIM` of `rgb: [H, W, 3]` against `target`.
pub fn renders_loss<T: Real>(
    tape: &mut Tape<T>,
    rgb: Var,
    target: &Image<T>,
    lambda_c: f64,
) -> Result<RendersLoss, LossError> {
    let t = target.to_tensor();
    let l = l1(tape, rgb, &t)?;
    let d = dssim(tape, rgb, &t)?;
    let a = tape.scale(l, 1.0 - lambda_c)?;
    let b = tape.scale(d, lambda_c)?;
    let total = tape.add(a, b)?;
    Ok(RendersLoss { l1: l, dssim: d, total })
}

/// `renders + λ_CMR·cmr + λ_LPFM·lpfm` on the tape; `None` terms are skipped.
pub fn total_loss<T: Real>(
    tape: &mut Tape<T>,
    renders: Var,
    cmr: Option<Var>,
    lpfm: Option<Var>,
    weights: &LossWeights,
) -> Result<Var, LossError> {
    let named = [("renders", Some(renders)), ("cmr", cmr), ("lpfm", lpfm)];
    for (name, v) in named {
        if let Some(v) = v {
            if !tape.value(v).is_finite() {
                return Err(LossError::NonFinite(name));
            }
        }
    }
    let mut total = renders;
    for (v, w) in [(cmr, weights.lambda_cmr), (lpfm, weights.lambda_lpfm)] {
        if let Some(v) = v {
            let s = tape.scale(v, w)?;
            total = tape.add(total, s)?;
        }
    }
    Ok(total)
}

pub fn mse<T: Real>(a: &Image<T>, b: &Image<T>) -> Result<f64, LossError> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(LossError::Dimensions(format!(
            "{}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    let s: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x.as_f64() - y.as_f64()).powi(2))
        .sum();
    Ok(s / a.data.len().max(1) as f64)
}

/// `10·log10(1/MSE)` for images in `[0, 1]`, capped at [`PSNR_CAP`].
pub fn psnr<T: Real>(a: &Image<T>, b: &Image<T>) -> Result<f64, LossError> {
    let m = mse(a, b)?;
    if m <= 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / m).log10()).min(PSNR_CAP))
}

/// Mean SSIM between two images (no gradients).
pub fn ssim_value<T: Real>(a: &Image<T>, b: &Image<T>) -> Result<f64, LossError> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(LossError::Dimensions(format!(
            "{}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    if a.width < SSIM_WINDOW || a.height < SSIM_WINDOW {
        return Err(LossError::Dimensions("image smaller than the SSIM window".into()));
    }
    let (s, _) = ssim_core(&a.data, &b.data, a.height, a.width, 3, false);
    Ok(s.as_f64())
}
