//! View-dependent color from degree-1 spherical harmonics.

use crate::ad::{AdError, Backward, Tape, Tensor, Var};
use crate::geom::{self, Vec3};
use crate::scalar::Real;
use crate::scene::{sh_basis, SH_C1, SH_COEFFS};

struct ShColorOp<T> {
    eye: Vec3<T>,
}

fn direction<T: Real>(eye: &Vec3<T>, mu: &[T]) -> (Vec3<T>, T) {
    let v = geom::sub(&[mu[0], mu[1], mu[2]], eye);
    let n = geom::norm(&v).max(T::of(1e-12));
    (geom::scale(&v, T::one() / n), n)
}

fn raw_color<T: Real>(sh: &[T], basis: &[T; 4], c: usize) -> T {
    let mut v = T::of(0.5);
    for (k, b) in basis.iter().enumerate() {
        v += *b * sh[k * 3 + c];
    }
    v
}

impl<T: Real> Backward<T> for ShColorOp<T> {
    fn name(&self) -> &'static str {
        "sh_color"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>, AdError> {
        let (sh, mu) = (inputs[0], inputs[1]);
        let n = sh.rows();
        let mut gsh = vec![T::zero(); n * SH_COEFFS];
        let mut gmu = vec![T::zero(); n * 3];
        let c1 = T::of(SH_C1);
        for i in 0..n {
            let coeffs = sh.row(i);
            let (dir, len) = direction(&self.eye, mu.row(i));
            let basis = sh_basis(&dir);
            let mut gdir = [T::zero(); 3];
            for c in 0..3 {
                let raw = raw_color(coeffs, &basis, c);
                if raw < T::zero() || raw > T::one() {
                    continue;
                }
                let g = grad.at(i, c);
                for k in 0..4 {
                    gsh[i * SH_COEFFS + k * 3 + c] = g * basis[k];
                }
                gdir[0] -= g * c1 * coeffs[9 + c];
                gdir[1] -= g * c1 * coeffs[3 + c];
                gdir[2] += g * c1 * coeffs[6 + c];
            }
            let proj = geom::dot(&dir, &gdir);
            for a in 0..3 {
                gmu[i * 3 + a] = (gdir[a] - dir[a] * proj) / len;
            }
        }
        Ok(vec![
            Some(Tensor::new(sh.shape().to_vec(), gsh)?),
            Some(Tensor::new(mu.shape().to_vec(), gmu)?),
        ])
    }
}

/// RGB `[N,3]` of SH coefficients `sh [N,12]` seen from `eye`, for centers
/// `mu [N,3]`; clamped to `[0, 1]`.
pub fn sh_color<T: Real>(tape: &mut Tape<T>, sh: Var, mu: Var, eye: Vec3<T>) -> Result<Var, AdError> {
    let (shv, mv) = (tape.value(sh), tape.value(mu));
    if shv.cols() != SH_COEFFS || mv.cols() != 3 || shv.rows() != mv.rows() {
        return Err(AdError::ShapeMismatch(format!(
            "sh_color {:?} {:?}",
            shv.shape(),
            mv.shape()
        )));
    }
    let n = shv.rows();
    let mut out = Vec::with_capacity(n * 3);
    for i in 0..n {
        let (dir, _) = direction(&eye, mv.row(i));
        let basis = sh_basis(&dir);
        for c in 0..3 {
            out.push(raw_color(shv.row(i), &basis, c).max(T::zero()).min(T::one()));
        }
    }
    let value = Tensor::new(vec![n, 3], out)?;
    tape.push(Box::new(ShColorOp { eye }), &[sh, mu], value)
}
