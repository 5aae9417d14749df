//! Fixed-shape 3-vector and 3x3-matrix algebra used by all kinematics.

use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub, SubAssign};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum LinalgError {
    #[error("matrix is numerically singular (|det| = {det:e})")]
    Singular { det: f64 },
}

/// 3-dimensional real vector. Positions, velocities and field values all
/// share this type.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

pub const ZERO3: Vec3 = Vec3 {
    x: 0.0,
    y: 0.0,
    z: 0.0,
};

impl Vec3 {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn dot(self, other: Vec3) -> f64 {
        self.x * other.x + self.y * other.y + self.z * other.z
    }

    /// Right-handed cross product `self x other`.
    pub fn cross(self, other: Vec3) -> Vec3 {
        Vec3::new(
            self.y * other.z - self.z * other.y,
            self.z * other.x - self.x * other.z,
            self.x * other.y - self.y * other.x,
        )
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    /// Maximum absolute component, the norm used by fixed-point stopping
    /// criteria.
    pub fn max_norm(self) -> f64 {
        self.x.abs().max(self.y.abs()).max(self.z.abs())
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl AddAssign for Vec3 {
    fn add_assign(&mut self, o: Vec3) {
        *self = *self + o;
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl SubAssign for Vec3 {
    fn sub_assign(&mut self, o: Vec3) {
        *self = *self - o;
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl Mul<Vec3> for f64 {
    type Output = Vec3;
    fn mul(self, v: Vec3) -> Vec3 {
        v * self
    }
}

impl Div<f64> for Vec3 {
    type Output = Vec3;
    fn div(self, s: f64) -> Vec3 {
        Vec3::new(self.x / s, self.y / s, self.z / s)
    }
}

/// 3x3 real matrix, row-major.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mat3 {
    pub rows: [[f64; 3]; 3],
}

impl Mat3 {
    pub const fn new(rows: [[f64; 3]; 3]) -> Self {
        Self { rows }
    }

    pub const fn zero() -> Self {
        Self::new([[0.0; 3]; 3])
    }

    pub const fn identity() -> Self {
        Self::new([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    }

    pub fn diag(a: f64, b: f64, c: f64) -> Self {
        Self::new([[a, 0.0, 0.0], [0.0, b, 0.0], [0.0, 0.0, c]])
    }

    pub fn transpose(self) -> Mat3 {
        let r = self.rows;
        Mat3::new([
            [r[0][0], r[1][0], r[2][0]],
            [r[0][1], r[1][1], r[2][1]],
            [r[0][2], r[1][2], r[2][2]],
        ])
    }

    pub fn det(self) -> f64 {
        let r = self.rows;
        r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
            - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0])
    }

    pub fn max_abs_entry(self) -> f64 {
        self.rows
            .iter()
            .flatten()
            .fold(0.0_f64, |m, &e| m.max(e.abs()))
    }

    /// Closed-form inverse via adjugate and determinant. Errors when the
    /// determinant is below `1e-300 * max_entry^3`.
    pub fn inverse(self) -> Result<Mat3, LinalgError> {
        let r = self.rows;
        let c00 = r[1][1] * r[2][2] - r[1][2] * r[2][1];
        let c01 = r[1][2] * r[2][0] - r[1][0] * r[2][2];
        let c02 = r[1][0] * r[2][1] - r[1][1] * r[2][0];
        let c10 = r[0][2] * r[2][1] - r[0][1] * r[2][2];
        let c11 = r[0][0] * r[2][2] - r[0][2] * r[2][0];
        let c12 = r[0][1] * r[2][0] - r[0][0] * r[2][1];
        let c20 = r[0][1] * r[1][2] - r[0][2] * r[1][1];
        let c21 = r[0][2] * r[1][0] - r[0][0] * r[1][2];
        let c22 = r[0][0] * r[1][1] - r[0][1] * r[1][0];
        let det = r[0][0] * c00 + r[0][1] * c01 + r[0][2] * c02;
        let scale = self.max_abs_entry().max(1.0);
        if det.abs() < 1e-300 * scale * scale * scale {
            return Err(LinalgError::Singular { det });
        }
        let inv = 1.0 / det;
        Ok(Mat3::new([
            [c00 * inv, c10 * inv, c20 * inv],
            [c01 * inv, c11 * inv, c21 * inv],
            [c02 * inv, c12 * inv, c22 * inv],
        ]))
    }
}

impl Add for Mat3 {
    type Output = Mat3;
    fn add(self, o: Mat3) -> Mat3 {
        let mut r = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                r[i][j] = self.rows[i][j] + o.rows[i][j];
            }
        }
        Mat3::new(r)
    }
}

impl Sub for Mat3 {
    type Output = Mat3;
    fn sub(self, o: Mat3) -> Mat3 {
        let mut r = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                r[i][j] = self.rows[i][j] - o.rows[i][j];
            }
        }
        Mat3::new(r)
    }
}

impl Mul<f64> for Mat3 {
    type Output = Mat3;
    fn mul(self, s: f64) -> Mat3 {
        let mut r = self.rows;
        for row in r.iter_mut() {
            for e in row.iter_mut() {
                *e *= s;
            }
        }
        Mat3::new(r)
    }
}

impl Mul<Vec3> for Mat3 {
    type Output = Vec3;
    fn mul(self, v: Vec3) -> Vec3 {
        let r = self.rows;
        Vec3::new(
            r[0][0] * v.x + r[0][1] * v.y + r[0][2] * v.z,
            r[1][0] * v.x + r[1][1] * v.y + r[1][2] * v.z,
            r[2][0] * v.x + r[2][1] * v.y + r[2][2] * v.z,
        )
    }
}

impl Mul<Mat3> for Mat3 {
    type Output = Mat3;
    fn mul(self, o: Mat3) -> Mat3 {
        let mut r = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                for k in 0..3 {
                    r[i][j] += self.rows[i][k] * o.rows[k][j];
                }
            }
        }
        Mat3::new(r)
    }
}

/// Skew (hat) map: `hat(b) * w == b x w` for every `w`. In particular
/// `hat(B0)` is the matrix `-hat(B0) v = v x B0` from the field equations.
pub fn hat(b: Vec3) -> Mat3 {
    Mat3::new([[0.0, -b.z, b.y], [b.z, 0.0, -b.x], [-b.y, b.x, 0.0]])
}
