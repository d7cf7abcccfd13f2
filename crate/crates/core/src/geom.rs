//! Small fixed-size linear algebra used by the renderer and scene code.

use crate::scalar::Real;

pub type Vec3<T> = [T; 3];
pub type Mat3<T> = [[T; 3]; 3];
/// Quaternion stored as `(w, x, y, z)`.
pub type Quat<T> = [T; 4];

pub fn dot<T: Real>(a: &Vec3<T>, b: &Vec3<T>) -> T {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross<T: Real>(a: &Vec3<T>, b: &Vec3<T>) -> Vec3<T> {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn add<T: Real>(a: &Vec3<T>, b: &Vec3<T>) -> Vec3<T> {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn sub<T: Real>(a: &Vec3<T>, b: &Vec3<T>) -> Vec3<T> {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn scale<T: Real>(a: &Vec3<T>, s: T) -> Vec3<T> {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub fn norm<T: Real>(a: &Vec3<T>) -> T {
    dot(a, a).sqrt()
}

pub fn identity<T: Real>() -> Mat3<T> {
    let (o, z) = (T::one(), T::zero());
    [[o, z, z], [z, o, z], [z, z, o]]
}

pub fn mat_vec<T: Real>(m: &Mat3<T>, v: &Vec3<T>) -> Vec3<T> {
    [dot(&m[0], v), dot(&m[1], v), dot(&m[2], v)]
}

pub fn mat_mul<T: Real>(a: &Mat3<T>, b: &Mat3<T>) -> Mat3<T> {
    let mut out = [[T::zero(); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            for k in 0..3 {
                out[i][j] += a[i][k] * b[k][j];
            }
        }
    }
    out
}

pub fn transpose<T: Real>(m: &Mat3<T>) -> Mat3<T> {
    let mut out = [[T::zero(); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = m[j][i];
        }
    }
    out
}

pub fn quat_norm<T: Real>(q: &Quat<T>) -> T {
    (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt()
}

pub fn quat_normalize<T: Real>(q: &Quat<T>) -> Quat<T> {
    let n = quat_norm(q);
    [q[0] / n, q[1] / n, q[2] / n, q[3] / n]
}

/// Hamilton product `a * b`.
pub fn quat_mul<T: Real>(a: &Quat<T>, b: &Quat<T>) -> Quat<T> {
    [
        a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
        a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
        a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
        a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0],
    ]
}

pub fn quat_from_axis_angle<T: Real>(axis: &Vec3<T>, angle: T) -> Quat<T> {
    let n = norm(axis);
    if n == T::zero() {
        return [T::one(), T::zero(), T::zero(), T::zero()];
    }
    let half = angle * T::of(0.5);
    let s = half.sin() / n;
    [half.cos(), axis[0] * s, axis[1] * s, axis[2] * s]
}

/// Rotation matrix of a unit quaternion.
pub fn quat_to_mat<T: Real>(q: &Quat<T>) -> Mat3<T> {
    let [w, x, y, z] = *q;
    let two = T::of(2.0);
    let one = T::one();
    [
        [
            one - two * (y * y + z * z),
            two * (x * y - w * z),
            two * (x * z + w * y),
        ],
        [
            two * (x * y + w * z),
            one - two * (x * x + z * z),
            two * (y * z - w * x),
        ],
        [
            two * (x * z - w * y),
            two * (y * z + w * x),
            one - two * (x * x + y * y),
        ],
    ]
}

/// Partial derivatives of [`quat_to_mat`] with respect to `(w, x, y, z)`.
pub fn quat_to_mat_grad<T: Real>(q: &Quat<T>) -> [Mat3<T>; 4] {
    let [w, x, y, z] = *q;
    let two = T::of(2.0);
    let z0 = T::zero();
    let n = |v: T| -two * two * v;
    [
        [
            [z0, -two * z, two * y],
            [two * z, z0, -two * x],
            [-two * y, two * x, z0],
        ],
        [
            [z0, two * y, two * z],
            [two * y, n(x), -two * w],
            [two * z, two * w, n(x)],
        ],
        [
            [n(y), two * x, two * w],
            [two * x, z0, two * z],
            [-two * w, two * z, n(y)],
        ],
        [
            [n(z), -two * w, two * x],
            [two * w, n(z), two * y],
            [two * x, two * y, z0],
        ],
    ]
}

/// Symmetric 2x2 matrix `[[a, b], [b, c]]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sym2<T> {
    pub a: T,
    pub b: T,
    pub c: T,
}

impl<T: Real> Sym2<T> {
    pub fn new(a: T, b: T, c: T) -> Self {
        Self { a, b, c }
    }

    pub fn identity() -> Self {
        Self::new(T::one(), T::zero(), T::one())
    }

    pub fn det(&self) -> T {
        self.a * self.c - self.b * self.b
    }

    pub fn inverse(&self) -> Self {
        let d = self.det();
        Self::new(self.c / d, -self.b / d, self.a / d)
    }

    pub fn apply(&self, v: [T; 2]) -> [T; 2] {
        [self.a * v[0] + self.b * v[1], self.b * v[0] + self.c * v[1]]
    }

    pub fn quad(&self, v: [T; 2]) -> T {
        let w = self.apply(v);
        v[0] * w[0] + v[1] * w[1]
    }

    pub fn mul(&self, o: &Self) -> [[T; 2]; 2] {
        [
            [self.a * o.a + self.b * o.b, self.a * o.b + self.b * o.c],
            [self.b * o.a + self.c * o.b, self.b * o.b + self.c * o.c],
        ]
    }

    /// Eigenvalues (descending) and the unit eigenvector of the larger one.
    ///
    /// The second eigenvector is the first rotated by +90 degrees.
    pub fn eigen(&self) -> ([T; 2], [T; 2]) {
        let half = T::of(0.5);
        let mean = (self.a + self.c) * half;
        let diff = (self.a - self.c) * half;
        let r = (diff * diff + self.b * self.b).sqrt();
        let l1 = mean + r;
        let l2 = mean - r;
        let v = if self.b.abs() > T::zero() {
            let v = [self.b, l1 - self.a];
            let n = (v[0] * v[0] + v[1] * v[1]).sqrt();
            [v[0] / n, v[1] / n]
        } else if self.a >= self.c {
            [T::one(), T::zero()]
        } else {
            [T::zero(), T::one()]
        };
        ([l1, l2], v)
    }
}
