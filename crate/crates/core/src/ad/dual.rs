//! Forward-mode tangents carried as tape nodes.
//!
//! A [`Dual`] pairs a value with its directional derivatives along the four
//! input coordinates `(x, y, z, t)`. Every tangent is itself a tape node, so
//! quantities assembled from them (velocity gradients, stress divergence) stay
//! differentiable with respect to the field's weights.

use crate::ad::{AdError, Tape, Tensor, Var};
use crate::scalar::Real;

/// Number of input coordinates a dual carries tangents for.
pub const AXES: usize = 4;

#[derive(Clone, Copy, Debug)]
pub struct Dual {
    pub value: Var,
    /// `None` means the tangent is identically zero.
    pub tangents: [Option<Var>; AXES],
}

impl Dual {
    pub fn constant(value: Var) -> Self {
        Self {
            value,
            tangents: [None; AXES],
        }
    }

    /// Seeds `points: [M, 4]` as the independent coordinates.
    pub fn coordinates<T: Real>(tape: &mut Tape<T>, points: &Tensor<T>) -> Result<Self, AdError> {
        if points.cols() != AXES {
            return Err(AdError::ShapeMismatch(format!(
                "coordinate block must have 4 columns, got {:?}",
                points.shape()
            )));
        }
        let m = points.rows();
        let value = tape.constant(points.clone().reshaped(&[m, AXES])?);
        let mut tangents = [None; AXES];
        for (a, slot) in tangents.iter_mut().enumerate() {
            let mut seed = Tensor::zeros(&[m, AXES]);
            for r in 0..m {
                seed.data_mut()[r * AXES + a] = T::one();
            }
            *slot = Some(tape.constant(seed));
        }
        Ok(Self { value, tangents })
    }

    fn map_tangents<T: Real>(
        &self,
        tape: &mut Tape<T>,
        mut f: impl FnMut(&mut Tape<T>, Var) -> Result<Var, AdError>,
    ) -> Result<[Option<Var>; AXES], AdError> {
        let mut out = [None; AXES];
        for (a, t) in self.tangents.iter().enumerate() {
            if let Some(t) = *t {
                out[a] = Some(f(tape, t)?);
            }
        }
        Ok(out)
    }

    pub fn add<T: Real>(&self, tape: &mut Tape<T>, other: &Dual) -> Result<Dual, AdError> {
        let value = tape.add(self.value, other.value)?;
        let mut tangents = [None; AXES];
        for a in 0..AXES {
            tangents[a] = match (self.tangents[a], other.tangents[a]) {
                (Some(x), Some(y)) => Some(tape.add(x, y)?),
                (Some(x), None) => Some(x),
                (None, Some(y)) => Some(broadcast_to(tape, y, value)?),
                (None, None) => None,
            };
        }
        Ok(Dual { value, tangents })
    }

    pub fn sub<T: Real>(&self, tape: &mut Tape<T>, other: &Dual) -> Result<Dual, AdError> {
        let neg = other.neg(tape)?;
        self.add(tape, &neg)
    }

    pub fn neg<T: Real>(&self, tape: &mut Tape<T>) -> Result<Dual, AdError> {
        self.scale(tape, -1.0)
    }

    pub fn scale<T: Real>(&self, tape: &mut Tape<T>, c: f64) -> Result<Dual, AdError> {
        let value = tape.scale(self.value, c)?;
        let tangents = self.map_tangents(tape, |tp, t| tp.scale(t, c))?;
        Ok(Dual { value, tangents })
    }

    pub fn offset<T: Real>(&self, tape: &mut Tape<T>, c: f64) -> Result<Dual, AdError> {
        Ok(Dual {
            value: tape.offset(self.value, c)?,
            tangents: self.tangents,
        })
    }

    /// Product rule; `other` may broadcast as in [`Tape::mul`].
    pub fn mul<T: Real>(&self, tape: &mut Tape<T>, other: &Dual) -> Result<Dual, AdError> {
        let value = tape.mul(self.value, other.value)?;
        let mut tangents = [None; AXES];
        for a in 0..AXES {
            let left = match self.tangents[a] {
                Some(t) => Some(tape.mul(t, other.value)?),
                None => None,
            };
            let right = match other.tangents[a] {
                Some(t) => Some(tape.mul(self.value, t)?),
                None => None,
            };
            tangents[a] = match (left, right) {
                (Some(l), Some(r)) => Some(tape.add(l, r)?),
                (l, r) => l.or(r),
            };
        }
        Ok(Dual { value, tangents })
    }

    /// `x W + b` with constant-in-coordinates weights.
    pub fn affine<T: Real>(
        &self,
        tape: &mut Tape<T>,
        w: Var,
        b: Var,
    ) -> Result<Dual, AdError> {
        let value = tape.affine(self.value, w, b)?;
        let tangents = self.map_tangents(tape, |tp, t| tp.matmul(t, w))?;
        Ok(Dual { value, tangents })
    }

    pub fn relu<T: Real>(&self, tape: &mut Tape<T>) -> Result<Dual, AdError> {
        let mask = self
            .value_of(tape)
            .map(|x| if x > T::zero() { T::one() } else { T::zero() });
        let mask = tape.constant(mask);
        let value = tape.relu(self.value)?;
        let tangents = self.map_tangents(tape, |tp, t| tp.mul(t, mask))?;
        Ok(Dual { value, tangents })
    }

    pub fn sigmoid<T: Real>(&self, tape: &mut Tape<T>) -> Result<Dual, AdError> {
        let s = tape.sigmoid(self.value)?;
        if self.tangents.iter().all(Option::is_none) {
            return Ok(Dual::constant(s));
        }
        let s2 = tape.square(s)?;
        let ds = tape.sub(s, s2)?;
        let tangents = self.map_tangents(tape, |tp, t| tp.mul(t, ds))?;
        Ok(Dual { value: s, tangents })
    }

    pub fn sin<T: Real>(&self, tape: &mut Tape<T>) -> Result<Dual, AdError> {
        let value = tape.sin(self.value)?;
        if self.tangents.iter().all(Option::is_none) {
            return Ok(Dual::constant(value));
        }
        let c = tape.cos(self.value)?;
        let tangents = self.map_tangents(tape, |tp, t| tp.mul(t, c))?;
        Ok(Dual { value, tangents })
    }

    pub fn cos<T: Real>(&self, tape: &mut Tape<T>) -> Result<Dual, AdError> {
        let value = tape.cos(self.value)?;
        if self.tangents.iter().all(Option::is_none) {
            return Ok(Dual::constant(value));
        }
        let s = tape.sin(self.value)?;
        let ns = tape.neg(s)?;
        let tangents = self.map_tangents(tape, |tp, t| tp.mul(t, ns))?;
        Ok(Dual { value, tangents })
    }

    pub fn square<T: Real>(&self, tape: &mut Tape<T>) -> Result<Dual, AdError> {
        let this = *self;
        this.mul(tape, &this)
    }

    pub fn slice_cols<T: Real>(
        &self,
        tape: &mut Tape<T>,
        start: usize,
        len: usize,
    ) -> Result<Dual, AdError> {
        let value = tape.slice_cols(self.value, start, len)?;
        let tangents = self.map_tangents(tape, |tp, t| tp.slice_cols(t, start, len))?;
        Ok(Dual { value, tangents })
    }

    pub fn concat_cols<T: Real>(tape: &mut Tape<T>, parts: &[Dual]) -> Result<Dual, AdError> {
        let values: Vec<Var> = parts.iter().map(|p| p.value).collect();
        let value = tape.concat_cols(&values)?;
        let mut tangents = [None; AXES];
        for (a, slot) in tangents.iter_mut().enumerate() {
            if parts.iter().all(|p| p.tangents[a].is_none()) {
                continue;
            }
            let mut cols = Vec::with_capacity(parts.len());
            for p in parts {
                let t = match p.tangents[a] {
                    Some(t) => t,
                    None => {
                        let shape = tape.shape(p.value).to_vec();
                        tape.constant(Tensor::zeros(&shape))
                    }
                };
                cols.push(t);
            }
            *slot = Some(tape.concat_cols(&cols)?);
        }
        Ok(Dual { value, tangents })
    }

    fn value_of<'a, T: Real>(&self, tape: &'a Tape<T>) -> &'a Tensor<T> {
        tape.value(self.value)
    }
}

fn broadcast_to<T: Real>(tape: &mut Tape<T>, small: Var, like: Var) -> Result<Var, AdError> {
    if tape.shape(small) == tape.shape(like) {
        return Ok(small);
    }
    let zeros = tape.constant(Tensor::zeros(tape.shape(like)));
    tape.add(zeros, small)
}

/// Checks that a point lies in the normalized domain `[0, 1]^4`.
pub fn check_unit_domain<T: Real>(p: &[T]) -> Result<(), AdError> {
    if p.iter().all(|&v| v >= T::zero() && v <= T::one()) {
        Ok(())
    } else {
        Err(AdError::OutOfDomain(format!(
            "point {:?} outside [0,1]^{}",
            p.iter().map(|v| v.as_f64()).collect::<Vec<_>>(),
            p.len()
        )))
    }
}

/// `k x 4` Jacobian of a field `R^4 -> R^k` at one point.
///
/// Row `i` holds `(d f_i/dx, d f_i/dy, d f_i/dz, d f_i/dt)`.
pub fn coord_jacobian<T, F>(point: [T; AXES], field: F) -> Result<Vec<[T; AXES]>, AdError>
where
    T: Real,
    F: FnOnce(&mut Tape<T>, &Dual) -> Result<Dual, AdError>,
{
    check_unit_domain(&point)?;
    let mut tape = Tape::new();
    let input = Dual::coordinates(&mut tape, &Tensor::matrix(1, AXES, point.to_vec())?)?;
    let out = field(&mut tape, &input)?;
    let k = tape.value(out.value).len();
    let mut rows = vec![[T::zero(); AXES]; k];
    for a in 0..AXES {
        if let Some(t) = out.tangents[a] {
            for (i, row) in rows.iter_mut().enumerate() {
                row[a] = tape.value(t).data()[i];
            }
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_field_rows() {
        let jac = coord_jacobian([0.2, 0.3, 0.4, 0.5], |tape: &mut Tape<f64>, p| {
            let x = p.slice_cols(tape, 0, 1)?;
            let t = p.slice_cols(tape, 3, 1)?;
            let t2 = t.scale(tape, 2.0)?;
            let f0 = x.add(tape, &t2)?;
            let z = x.scale(tape, 0.0)?;
            let z = Dual::constant(z.value);
            Dual::concat_cols(tape, &[f0, z, z])
        })
        .unwrap();
        assert_eq!(jac[0], [1.0, 0.0, 0.0, 2.0]);
        assert_eq!(jac[1], [0.0; 4]);
        assert_eq!(jac[2], [0.0; 4]);
    }

    #[test]
    fn out_of_domain_point_rejected() {
        let r = coord_jacobian([1.2, 0.0, 0.0, 0.0], |_tape: &mut Tape<f64>, p| Ok(*p));
        assert!(matches!(r, Err(AdError::OutOfDomain(_))));
    }

    #[test]
    fn product_and_sine_rules() {
        // f = sin(x) * y  ->  (y cos x, sin x, 0, 0)
        let (x0, y0) = (0.3f64, 0.7f64);
        let jac = coord_jacobian([x0, y0, 0.1, 0.1], |tape: &mut Tape<f64>, p| {
            let x = p.slice_cols(tape, 0, 1)?;
            let y = p.slice_cols(tape, 1, 1)?;
            let s = x.sin(tape)?;
            s.mul(tape, &y)
        })
        .unwrap();
        assert!((jac[0][0] - y0 * x0.cos()).abs() < 1e-15);
        assert!((jac[0][1] - x0.sin()).abs() < 1e-15);
        assert_eq!(jac[0][2], 0.0);
    }
}
