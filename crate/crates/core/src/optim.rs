//! Adam with per-row freezing and row remapping after densification.

use crate::ad::Tensor;
use crate::scalar::Real;
use crate::scene::RowOrigins;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Moment estimates of one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamSlot<T> {
    pub m: Tensor<T>,
    pub v: Tensor<T>,
    pub step: u64,
}

impl<T: Real> AdamSlot<T> {
    pub fn new(shape: &[usize]) -> Self {
        Self {
            m: Tensor::zeros(shape),
            v: Tensor::zeros(shape),
            step: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub slots: Vec<AdamSlot<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new<'a>(shapes: impl IntoIterator<Item = &'a [usize]>) -> Self {
        Self {
            beta1: BETA1,
            beta2: BETA2,
            eps: EPSILON,
            slots: shapes.into_iter().map(AdamSlot::new).collect(),
        }
    }

    /// One bias-corrected update of `param` (slot `i`). A missing gradient is
    /// treated as zero; rows flagged in `frozen` keep both their value and
    /// their moments.
    pub fn step(&mut self, i: usize, param: &mut Tensor<T>, grad: Option<&Tensor<T>>, rate: f64, frozen: Option<&[bool]>) {
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let eps = T::of(self.eps);
        let slot = &mut self.slots[i];
        assert_eq!(slot.m.shape(), param.shape(), "optimizer slot {i} shape");
        slot.step += 1;
        let t = slot.step as i32;
        let c1 = T::one() - b1.powi(t);
        let c2 = T::one() - b2.powi(t);
        let lr = T::of(rate);
        let cols = param.cols().max(1);
        let one = T::one();
        let m = slot.m.data_mut();
        let v = slot.v.data_mut();
        let p = param.data_mut();
        for k in 0..p.len() {
            if frozen.is_some_and(|f| f[k / cols]) {
                continue;
            }
            let g = grad.map_or(T::zero(), |g| g.data()[k]);
            m[k] = b1 * m[k] + (one - b1) * g;
            v[k] = b2 * v[k] + (one - b2) * g * g;
            let mh = m[k] / c1;
            let vh = v[k] / c2;
            p[k] -= lr * mh / (vh.sqrt() + eps);
        }
    }

    /// Rebuilds the moments of a per-particle slot after rows were cloned,
    /// split or pruned: row `r` takes the moments of `origins[r]`, or zeros.
    pub fn remap_rows(&mut self, i: usize, origins: &RowOrigins) {
        let slot = &mut self.slots[i];
        let cols = slot.m.cols();
        let mut shape = slot.m.shape().to_vec();
        shape[0] = origins.len();
        let remap = |src: &Tensor<T>| {
            let mut out = Tensor::zeros(&shape);
            for (r, o) in origins.iter().enumerate() {
                if let Some(o) = *o {
                    out.data_mut()[r * cols..(r + 1) * cols].copy_from_slice(src.row(o));
                }
            }
            out
        };
        slot.m = remap(&slot.m);
        slot.v = remap(&slot.v);
    }
}

/// `base · 0.1^(iter / every)`.
pub fn exp_decay(base: f64, iter: usize, every: f64) -> f64 {
    base * 0.1f64.powf(iter as f64 / every.max(1.0))
}
