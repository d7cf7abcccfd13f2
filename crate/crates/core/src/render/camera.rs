use serde::{Deserialize, Serialize};

use crate::geom::{self, Mat3, Vec3};
use crate::scalar::Real;

/// Pinhole camera; `rotation`/`translation` map world to camera space
/// (x right, y down, z forward). Pixel centers sit at integer coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera<T> {
    pub fx: T,
    pub fy: T,
    pub cx: T,
    pub cy: T,
    pub rotation: Mat3<T>,
    pub translation: Vec3<T>,
    pub width: usize,
    pub height: usize,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CameraError {
    #[error("focal length must be positive")]
    NonPositiveFocal,
    #[error("rotation not orthonormal (deviation {0:e})")]
    NotOrthonormal(f64),
    #[error("image size must be non-zero")]
    EmptyImage,
    #[error("degenerate look-at: eye coincides with target or up is parallel to view")]
    DegenerateLookAt,
}

impl<T: Real> Camera<T> {
    pub fn new(
        focal: [T; 2],
        principal: [T; 2],
        rotation: Mat3<T>,
        translation: Vec3<T>,
        width: usize,
        height: usize,
    ) -> Result<Self, CameraError> {
        let cam = Self {
            fx: focal[0],
            fy: focal[1],
            cx: principal[0],
            cy: principal[1],
            rotation,
            translation,
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<(), CameraError> {
        if !(self.fx > T::zero() && self.fy > T::zero()) {
            return Err(CameraError::NonPositiveFocal);
        }
        if self.width == 0 || self.height == 0 {
            return Err(CameraError::EmptyImage);
        }
        let rrt = geom::mat_mul(&self.rotation, &geom::transpose(&self.rotation));
        let mut dev = 0.0f64;
        for (i, row) in rrt.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                let target = if i == j { 1.0 } else { 0.0 };
                dev = dev.max((v.as_f64() - target).abs());
            }
        }
        if dev > 1e-9 {
            return Err(CameraError::NotOrthonormal(dev));
        }
        Ok(())
    }

    /// Camera at `eye` looking at `target`; `up` is the world up direction.
    pub fn look_at(
        eye: Vec3<T>,
        target: Vec3<T>,
        up: Vec3<T>,
        focal: T,
        width: usize,
        height: usize,
    ) -> Result<Self, CameraError> {
        let fwd = geom::sub(&target, &eye);
        let n = geom::norm(&fwd);
        if n.as_f64() < 1e-12 {
            return Err(CameraError::DegenerateLookAt);
        }
        let z = geom::scale(&fwd, T::one() / n);
        // image y points down, so right = forward x (-up)
        let down = geom::scale(&up, -T::one());
        let x = geom::cross(&down, &z);
        let xn = geom::norm(&x);
        if xn.as_f64() < 1e-12 {
            return Err(CameraError::DegenerateLookAt);
        }
        let x = geom::scale(&x, T::one() / xn);
        let y = geom::cross(&z, &x);
        let rotation = [x, y, z];
        let translation = geom::scale(&geom::mat_vec(&rotation, &eye), -T::one());
        Self::new(
            [focal, focal],
            [
                T::of((width as f64 - 1.0) * 0.5),
                T::of((height as f64 - 1.0) * 0.5),
            ],
            rotation,
            translation,
            width,
            height,
        )
    }

    pub fn to_camera(&self, x: &Vec3<T>) -> Vec3<T> {
        geom::add(&geom::mat_vec(&self.rotation, x), &self.translation)
    }

    pub fn to_world(&self, xc: &Vec3<T>) -> Vec3<T> {
        let d = geom::sub(xc, &self.translation);
        geom::mat_vec(&geom::transpose(&self.rotation), &d)
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vec3<T> {
        self.to_world(&[T::zero(); 3])
    }

    /// Pixel coordinates of a camera-space point.
    pub fn project_camera(&self, xc: &Vec3<T>) -> [T; 2] {
        [
            self.fx * xc[0] / xc[2] + self.cx,
            self.fy * xc[1] / xc[2] + self.cy,
        ]
    }

    /// Pixel coordinates and view depth of a world point.
    pub fn project_world(&self, x: &Vec3<T>) -> ([T; 2], T) {
        let xc = self.to_camera(x);
        (self.project_camera(&xc), xc[2])
    }

    /// Camera-space point at pixel `p` with depth `d` (`K^-1 d (u, v, 1)`).
    pub fn unproject(&self, p: [T; 2], depth: T) -> Vec3<T> {
        [
            (p[0] - self.cx) / self.fx * depth,
            (p[1] - self.cy) / self.fy * depth,
            depth,
        ]
    }

    /// `2 x 3` Jacobian of the pixel projection at camera-space `xc`.
    pub fn projection_jacobian(&self, xc: &Vec3<T>) -> [[T; 3]; 2] {
        let iz = T::one() / xc[2];
        [
            [self.fx * iz, T::zero(), -self.fx * xc[0] * iz * iz],
            [T::zero(), self.fy * iz, -self.fy * xc[1] * iz * iz],
        ]
    }

    pub fn in_image(&self, p: [T; 2]) -> bool {
        let (w, h) = (T::of(self.width as f64 - 1.0), T::of(self.height as f64 - 1.0));
        p[0] >= T::zero() && p[1] >= T::zero() && p[0] <= w && p[1] <= h
    }

    pub fn cast<U: Real>(&self) -> Camera<U> {
        let c = |v: T| U::of(v.as_f64());
        Camera {
            fx: c(self.fx),
            fy: c(self.fy),
            cx: c(self.cx),
            cy: c(self.cy),
            rotation: self.rotation.map(|r| r.map(c)),
            translation: self.translation.map(c),
            width: self.width,
            height: self.height,
        }
    }
}
