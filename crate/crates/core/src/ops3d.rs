//! Row-wise quaternion operations on the tape.

use crate::ad::{AdError, Backward, Tape, Tensor, Var};
use crate::geom::{quat_to_mat, quat_to_mat_grad};
use crate::scalar::Real;

/// Smallest quaternion norm accepted before normalisation.
pub const MIN_QUAT_NORM: f64 = 1e-8;

struct NormalizeRows;

impl<T: Real> Backward<T> for NormalizeRows {
    fn name(&self) -> &'static str {
        "normalize_rows"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>, AdError> {
        let x = inputs[0];
        let k = x.cols();
        let mut d = vec![T::zero(); x.len()];
        for r in 0..x.rows() {
            let xr = x.row(r);
            let n = xr.iter().map(|v| *v * *v).sum::<T>().sqrt();
            let y = output.row(r);
            let g = grad.row(r);
            let yg: T = y.iter().zip(g).map(|(a, b)| *a * *b).sum();
            for c in 0..k {
                d[r * k + c] = (g[c] - y[c] * yg) / n;
            }
        }
        Ok(vec![Some(Tensor::new(x.shape().to_vec(), d)?)])
    }
}

/// Normalises each row to unit length; rows with norm below
/// [`MIN_QUAT_NORM`] are a degenerate-rotation error.
pub fn normalize_rows<T: Real>(tape: &mut Tape<T>, x: Var) -> Result<Var, AdError> {
    let xv = tape.value(x);
    let k = xv.cols();
    let mut out = vec![T::zero(); xv.len()];
    for r in 0..xv.rows() {
        let row = xv.row(r);
        let n = row.iter().map(|v| *v * *v).sum::<T>().sqrt();
        if n.as_f64() < MIN_QUAT_NORM {
            return Err(AdError::DegenerateRotation(n.as_f64()));
        }
        for c in 0..k {
            out[r * k + c] = row[c] / n;
        }
    }
    let value = Tensor::new(xv.shape().to_vec(), out)?;
    tape.push(Box::new(NormalizeRows), &[x], value)
}

struct QuatRotate;

impl<T: Real> Backward<T> for QuatRotate {
    fn name(&self) -> &'static str {
        "quat_rotate"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>, AdError> {
        let (q, v) = (inputs[0], inputs[1]);
        let mut gq = vec![T::zero(); q.len()];
        let mut gv = vec![T::zero(); v.len()];
        for r in 0..q.rows() {
            let qr = [q.at(r, 0), q.at(r, 1), q.at(r, 2), q.at(r, 3)];
            let vr = [v.at(r, 0), v.at(r, 1), v.at(r, 2)];
            let g = [grad.at(r, 0), grad.at(r, 1), grad.at(r, 2)];
            let m = quat_to_mat(&qr);
            for j in 0..3 {
                gv[r * 3 + j] = (0..3).map(|i| m[i][j] * g[i]).sum();
            }
            let dm = quat_to_mat_grad(&qr);
            for k in 0..4 {
                let mut s = T::zero();
                for i in 0..3 {
                    for j in 0..3 {
                        s += g[i] * dm[k][i][j] * vr[j];
                    }
                }
                gq[r * 4 + k] = s;
            }
        }
        Ok(vec![
            Some(Tensor::new(q.shape().to_vec(), gq)?),
            Some(Tensor::new(v.shape().to_vec(), gv)?),
        ])
    }
}

/// Rotates each row of `v: [N, 3]` by the matrix of quaternion row `q: [N, 4]`.
pub fn quat_rotate<T: Real>(tape: &mut Tape<T>, q: Var, v: Var) -> Result<Var, AdError> {
    let (qv, vv) = (tape.value(q), tape.value(v));
    if qv.cols() != 4 || vv.cols() != 3 || qv.rows() != vv.rows() {
        return Err(AdError::ShapeMismatch(format!(
            "quat_rotate {:?} x {:?}",
            qv.shape(),
            vv.shape()
        )));
    }
    let mut out = Vec::with_capacity(vv.len());
    for r in 0..qv.rows() {
        let m = quat_to_mat(&[qv.at(r, 0), qv.at(r, 1), qv.at(r, 2), qv.at(r, 3)]);
        for row in &m {
            out.push(row[0] * vv.at(r, 0) + row[1] * vv.at(r, 1) + row[2] * vv.at(r, 2));
        }
    }
    let value = Tensor::new(vec![qv.rows(), 3], out)?;
    tape.push(Box::new(QuatRotate), &[q, v], value)
}
