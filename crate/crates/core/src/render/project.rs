//! EWA projection of 3-D Gaussians to screen-space ellipses.

use crate::ad::{AdError, Backward, Tape, Tensor, Var};
use crate::geom::{self, Mat3, Sym2, Vec3};
use crate::render::{Camera, NEAR_PLANE};
use crate::scalar::Real;

/// Screen-space covariance added to every projected Gaussian, in px².
pub const DILATION: f64 = 0.3;

/// Columns of a projected row: pixel mean `(u, v)`, covariance `(a, b, c)`, view depth `z`.
pub const PROJ_COLS: usize = 6;

/// Projection of a single Gaussian.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projected<T> {
    pub mean: [T; 2],
    pub cov: Sym2<T>,
    pub depth: T,
}

impl<T: Real> Projected<T> {
    pub fn visible(&self) -> bool {
        self.depth.as_f64() > NEAR_PLANE
    }

    pub fn from_row(row: &[T]) -> Self {
        Self {
            mean: [row[0], row[1]],
            cov: Sym2::new(row[2], row[3], row[4]),
            depth: row[5],
        }
    }
}

struct Geometry<T> {
    xc: Vec3<T>,
    /// `J W`, the 2x3 Jacobian of pixel position w.r.t. world position.
    jw: [[T; 3]; 2],
    jac: [[T; 3]; 2],
    sigma: Mat3<T>,
    rot: Mat3<T>,
    scale: Vec3<T>,
}

fn geometry<T: Real>(cam: &Camera<T>, mu: &Vec3<T>, q: &[T; 4], s: &Vec3<T>) -> Geometry<T> {
    let xc = cam.to_camera(mu);
    let jac = cam.projection_jacobian(&xc);
    let mut jw = [[T::zero(); 3]; 2];
    for r in 0..2 {
        for c in 0..3 {
            jw[r][c] = (0..3).map(|k| jac[r][k] * cam.rotation[k][c]).sum();
        }
    }
    let rot = geom::quat_to_mat(q);
    let scale = s.map(|v| v.exp());
    let mut sigma = [[T::zero(); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            sigma[i][j] = (0..3).map(|k| rot[i][k] * scale[k] * scale[k] * rot[j][k]).sum();
        }
    }
    Geometry {
        xc,
        jw,
        jac,
        sigma,
        rot,
        scale,
    }
}

/// Projects one Gaussian given its world center, unit quaternion and log-scales.
pub fn project_one<T: Real>(cam: &Camera<T>, mu: &Vec3<T>, q: &[T; 4], s: &Vec3<T>) -> Projected<T> {
    let g = geometry(cam, mu, q, s);
    if g.xc[2].as_f64() <= NEAR_PLANE {
        return Projected {
            mean: [T::zero(); 2],
            cov: Sym2::new(T::of(DILATION), T::zero(), T::of(DILATION)),
            depth: g.xc[2],
        };
    }
    let mean = cam.project_camera(&g.xc);
    let mut c = [[T::zero(); 2]; 2];
    for r in 0..2 {
        for k in 0..2 {
            let mut acc = T::zero();
            for i in 0..3 {
                for j in 0..3 {
                    acc += g.jw[r][i] * g.sigma[i][j] * g.jw[k][j];
                }
            }
            c[r][k] = acc;
        }
    }
    let d = T::of(DILATION);
    Projected {
        mean,
        cov: Sym2::new(c[0][0] + d, (c[0][1] + c[1][0]) * T::of(0.5), c[1][1] + d),
        depth: g.xc[2],
    }
}

struct ProjectOp<T: Real> {
    cam: Camera<T>,
}

impl<T: Real> Backward<T> for ProjectOp<T> {
    fn name(&self) -> &'static str {
        "project"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>, AdError> {
        let (mu, q, s) = (inputs[0], inputs[1], inputs[2]);
        let n = mu.rows();
        let mut gmu = vec![T::zero(); n * 3];
        let mut gq = vec![T::zero(); n * 4];
        let mut gs = vec![T::zero(); n * 3];
        let cam = &self.cam;
        let two = T::of(2.0);
        for i in 0..n {
            let m = [mu.at(i, 0), mu.at(i, 1), mu.at(i, 2)];
            let qq = [q.at(i, 0), q.at(i, 1), q.at(i, 2), q.at(i, 3)];
            let ss = [s.at(i, 0), s.at(i, 1), s.at(i, 2)];
            let g = geometry(cam, &m, &qq, &ss);
            if g.xc[2].as_f64() <= NEAR_PLANE {
                continue;
            }
            let gr = grad.row(i);
            let g2 = [[gr[2], gr[3] * T::of(0.5)], [gr[3] * T::of(0.5), gr[4]]];

            // covariance -> Sigma: G3 = (JW)^T G2 (JW)
            let mut g3 = [[T::zero(); 3]; 3];
            for a in 0..3 {
                for b in 0..3 {
                    let mut acc = T::zero();
                    for r in 0..2 {
                        for k in 0..2 {
                            acc += g.jw[r][a] * g2[r][k] * g.jw[k][b];
                        }
                    }
                    g3[a][b] = acc;
                }
            }
            // Sigma = M M^T, M = R S
            let mut dm = [[T::zero(); 3]; 3];
            for a in 0..3 {
                for b in 0..3 {
                    let mut acc = T::zero();
                    for k in 0..3 {
                        acc += g3[a][k] * g.rot[k][b] * g.scale[b];
                    }
                    dm[a][b] = two * acc;
                }
            }
            let mut dr = [[T::zero(); 3]; 3];
            for a in 0..3 {
                for b in 0..3 {
                    dr[a][b] = dm[a][b] * g.scale[b];
                }
            }
            for b in 0..3 {
                let ds: T = (0..3).map(|a| dm[a][b] * g.rot[a][b]).sum();
                gs[i * 3 + b] = ds * g.scale[b];
            }
            let dq = geom::quat_to_mat_grad(&qq);
            for k in 0..4 {
                let mut acc = T::zero();
                for a in 0..3 {
                    for b in 0..3 {
                        acc += dr[a][b] * dq[k][a][b];
                    }
                }
                gq[i * 4 + k] = acc;
            }

            // covariance -> J: dJ = 2 G2 J (W Sigma W^T)
            let mut wsw = [[T::zero(); 3]; 3];
            for a in 0..3 {
                for b in 0..3 {
                    let mut acc = T::zero();
                    for k in 0..3 {
                        for l in 0..3 {
                            acc += cam.rotation[a][k] * g.sigma[k][l] * cam.rotation[b][l];
                        }
                    }
                    wsw[a][b] = acc;
                }
            }
            let mut dj = [[T::zero(); 3]; 2];
            for r in 0..2 {
                for c in 0..3 {
                    let mut acc = T::zero();
                    for k in 0..2 {
                        for l in 0..3 {
                            acc += g2[r][k] * g.jac[k][l] * wsw[l][c];
                        }
                    }
                    dj[r][c] = two * acc;
                }
            }
            let [x, y, z] = g.xc;
            let iz = T::one() / z;
            let iz2 = iz * iz;
            let iz3 = iz2 * iz;
            let mut gxc = [T::zero(); 3];
            // mean and depth
            for c in 0..3 {
                gxc[c] = g.jac[0][c] * gr[0] + g.jac[1][c] * gr[1];
            }
            gxc[2] += gr[5];
            // Jacobian entries
            gxc[2] += dj[0][0] * (-cam.fx * iz2);
            gxc[0] += dj[0][2] * (-cam.fx * iz2);
            gxc[2] += dj[0][2] * (two * cam.fx * x * iz3);
            gxc[2] += dj[1][1] * (-cam.fy * iz2);
            gxc[1] += dj[1][2] * (-cam.fy * iz2);
            gxc[2] += dj[1][2] * (two * cam.fy * y * iz3);
            for c in 0..3 {
                gmu[i * 3 + c] = (0..3).map(|k| cam.rotation[k][c] * gxc[k]).sum();
            }
        }
        Ok(vec![
            Some(Tensor::new(vec![n, 3], gmu)?),
            Some(Tensor::new(vec![n, 4], gq)?),
            Some(Tensor::new(vec![n, 3], gs)?),
        ])
    }
}

/// Projects world centers `mu [N,3]`, unit quaternions `q [N,4]` and
/// log-scales `s [N,3]`; output rows are `(u, v, a, b, c, z)`.
///
/// Rows at or behind the near plane carry their depth and a zero mean and
/// are excluded by the rasterizer.
pub fn project<T: Real>(tape: &mut Tape<T>, cam: &Camera<T>, mu: Var, q: Var, s: Var) -> Result<Var, AdError> {
    let (mv, qv, sv) = (tape.value(mu), tape.value(q), tape.value(s));
    let n = mv.rows();
    if mv.cols() != 3 || qv.cols() != 4 || sv.cols() != 3 || qv.rows() != n || sv.rows() != n {
        return Err(AdError::ShapeMismatch(format!(
            "project {:?} {:?} {:?}",
            mv.shape(),
            qv.shape(),
            sv.shape()
        )));
    }
    let mut out = Vec::with_capacity(n * PROJ_COLS);
    for i in 0..n {
        let p = project_one(
            cam,
            &[mv.at(i, 0), mv.at(i, 1), mv.at(i, 2)],
            &[qv.at(i, 0), qv.at(i, 1), qv.at(i, 2), qv.at(i, 3)],
            &[sv.at(i, 0), sv.at(i, 1), sv.at(i, 2)],
        );
        out.extend_from_slice(&[p.mean[0], p.mean[1], p.cov.a, p.cov.b, p.cov.c, p.depth]);
    }
    let value = Tensor::new(vec![n, PROJ_COLS], out)?;
    tape.push(Box::new(ProjectOp { cam: cam.clone() }), &[mu, q, s], value)
}

struct ProjectVelocityOp<T: Real> {
    /// Per-row `J W`.
    jw: Vec<[[T; 3]; 2]>,
}

impl<T: Real> Backward<T> for ProjectVelocityOp<T> {
    fn name(&self) -> &'static str {
        "project_velocity"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>, AdError> {
        let n = inputs[0].rows();
        let mut gv = vec![T::zero(); n * 3];
        for (i, jw) in self.jw.iter().enumerate() {
            for c in 0..3 {
                gv[i * 3 + c] = jw[0][c] * grad.at(i, 0) + jw[1][c] * grad.at(i, 1);
            }
        }
        Ok(vec![Some(Tensor::new(vec![n, 3], gv)?)])
    }
}

/// Screen-space velocity `J W v` (px per unit time) of world velocities
/// `v [N,3]` at fixed world positions `positions`; culled rows give zero.
pub fn project_velocity<T: Real>(
    tape: &mut Tape<T>,
    cam: &Camera<T>,
    positions: &[Vec3<T>],
    v: Var,
) -> Result<Var, AdError> {
    let vv = tape.value(v);
    if vv.cols() != 3 || vv.rows() != positions.len() {
        return Err(AdError::ShapeMismatch(format!(
            "project_velocity {:?} for {} positions",
            vv.shape(),
            positions.len()
        )));
    }
    let mut jws = Vec::with_capacity(positions.len());
    let mut out = Vec::with_capacity(positions.len() * 2);
    for (i, p) in positions.iter().enumerate() {
        let xc = cam.to_camera(p);
        let mut jw = [[T::zero(); 3]; 2];
        if xc[2].as_f64() > NEAR_PLANE {
            let jac = cam.projection_jacobian(&xc);
            for r in 0..2 {
                for c in 0..3 {
                    jw[r][c] = (0..3).map(|k| jac[r][k] * cam.rotation[k][c]).sum();
                }
            }
        }
        for row in &jw {
            out.push((0..3).map(|c| row[c] * vv.at(i, c)).sum());
        }
        jws.push(jw);
    }
    let value = Tensor::new(vec![positions.len(), 2], out)?;
    tape.push(Box::new(ProjectVelocityOp { jw: jws }), &[v], value)
}
