//! Frame rotations for orientation augmentation.
//!
//! Angles follow the intrinsic z-y-x (yaw, pitch, roll) convention, so the
//! matrix is `R = Rz(yaw) * Ry(pitch) * Rx(roll)`. Quaternions are stored
//! `(w, x, y, z)`.

use std::f64::consts::TAU;
use std::ops::Mul;

use rand::Rng as _;

use crate::data::{Modality, SensorSample};
use crate::error::{input_err, Result};
use crate::rng::Rng;

pub type Matrix3 = [[f64; 3]; 3];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotationAngles {
    pub yaw: f64,
    pub pitch: f64,
    pub roll: f64,
}

impl RotationAngles {
    pub const ZERO: RotationAngles = RotationAngles {
        yaw: 0.0,
        pitch: 0.0,
        roll: 0.0,
    };
}

/// Three independent angles, uniform on `[0, 2pi)`.
pub fn draw_rotation(rng: &mut Rng) -> RotationAngles {
    let mut angle = || rng.random::<f64>() * TAU;
    RotationAngles {
        yaw: angle(),
        pitch: angle(),
        roll: angle(),
    }
}

pub fn rotation_matrix(a: RotationAngles) -> Matrix3 {
    let (sy, cy) = a.yaw.sin_cos();
    let (sp, cp) = a.pitch.sin_cos();
    let (sr, cr) = a.roll.sin_cos();
    [
        [cy * cp, cy * sp * sr - sy * cr, cy * sp * cr + sy * sr],
        [sy * cp, sy * sp * sr + cy * cr, sy * sp * cr - cy * sr],
        [-sp, cp * sr, cp * cr],
    ]
}

pub fn mat_mul(a: &Matrix3, b: &Matrix3) -> Matrix3 {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

pub fn mat_vec(m: &Matrix3, v: [f64; 3]) -> [f64; 3] {
    [0, 1, 2].map(|i| m[i][0] * v[0] + m[i][1] * v[1] + m[i][2] * v[2])
}

pub fn transpose(m: &Matrix3) -> Matrix3 {
    [0, 1, 2].map(|i| [m[0][i], m[1][i], m[2][i]])
}

pub fn determinant(m: &Matrix3) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quaternion {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Mul for Quaternion {
    type Output = Quaternion;

    fn mul(self, q: Quaternion) -> Quaternion {
        let p = self;
        Quaternion {
            w: p.w * q.w - p.x * q.x - p.y * q.y - p.z * q.z,
            x: p.w * q.x + p.x * q.w + p.y * q.z - p.z * q.y,
            y: p.w * q.y - p.x * q.z + p.y * q.w + p.z * q.x,
            z: p.w * q.z + p.x * q.y - p.y * q.x + p.z * q.w,
        }
    }
}

impl Quaternion {
    pub const IDENTITY: Quaternion = Quaternion {
        w: 1.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Quaternion { w, x, y, z }
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Quaternion::new(v[0], v[1], v[2], v[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn dot(self, q: Quaternion) -> f64 {
        self.w * q.w + self.x * q.x + self.y * q.y + self.z * q.z
    }

    pub fn conjugate(self) -> Self {
        Quaternion::new(self.w, -self.x, -self.y, -self.z)
    }

    pub fn normalized(self) -> Result<Self> {
        let n = self.norm();
        if !(n > 0.0) || !n.is_finite() {
            return Err(input_err!("cannot normalize quaternion {:?}", self.to_array()));
        }
        Ok(Quaternion::new(self.w / n, self.x / n, self.y / n, self.z / n))
    }

    /// `qz(yaw) * qy(pitch) * qx(roll)`, the quaternion of [`rotation_matrix`].
    pub fn from_angles(a: RotationAngles) -> Self {
        let (sy, cy) = (a.yaw / 2.0).sin_cos();
        let (sp, cp) = (a.pitch / 2.0).sin_cos();
        let (sr, cr) = (a.roll / 2.0).sin_cos();
        Quaternion::new(
            cr * cp * cy + sr * sp * sy,
            sr * cp * cy - cr * sp * sy,
            cr * sp * cy + sr * cp * sy,
            cr * cp * sy - sr * sp * cy,
        )
    }

    /// Rotation matrix of a unit quaternion.
    pub fn to_matrix(self) -> Matrix3 {
        let Quaternion { w, x, y, z } = self;
        [
            [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
            [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
            [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
        ]
    }

    /// Unit quaternion of a rotation matrix (Shepperd's method).
    pub fn from_matrix(m: &Matrix3) -> Self {
        let trace = m[0][0] + m[1][1] + m[2][2];
        let q = if trace > 0.0 {
            let s = (trace + 1.0).sqrt() * 2.0;
            Quaternion::new(0.25 * s, (m[2][1] - m[1][2]) / s, (m[0][2] - m[2][0]) / s, (m[1][0] - m[0][1]) / s)
        } else if m[0][0] > m[1][1] && m[0][0] > m[2][2] {
            let s = (1.0 + m[0][0] - m[1][1] - m[2][2]).sqrt() * 2.0;
            Quaternion::new((m[2][1] - m[1][2]) / s, 0.25 * s, (m[0][1] + m[1][0]) / s, (m[0][2] + m[2][0]) / s)
        } else if m[1][1] > m[2][2] {
            let s = (1.0 + m[1][1] - m[0][0] - m[2][2]).sqrt() * 2.0;
            Quaternion::new((m[0][2] - m[2][0]) / s, (m[0][1] + m[1][0]) / s, 0.25 * s, (m[1][2] + m[2][1]) / s)
        } else {
            let s = (1.0 + m[2][2] - m[0][0] - m[1][1]).sqrt() * 2.0;
            Quaternion::new((m[1][0] - m[0][1]) / s, (m[0][2] + m[2][0]) / s, (m[1][2] + m[2][1]) / s, 0.25 * s)
        };
        q.normalized().unwrap_or(Quaternion::IDENTITY)
    }

    /// Yaw, pitch, roll of a unit quaternion. Angles come back in
    /// `(-pi, pi]` (pitch in `[-pi/2, pi/2]`), not wrapped to `[0, 2pi)`.
    /// Ill-conditioned near pitch = +-pi/2.
    pub fn to_euler(self) -> RotationAngles {
        let Quaternion { w, x, y, z } = self;
        let sin_pitch = (2.0 * (w * y - z * x)).clamp(-1.0, 1.0);
        RotationAngles {
            yaw: (2.0 * (w * z + x * y)).atan2(1.0 - 2.0 * (y * y + z * z)),
            pitch: sin_pitch.asin(),
            roll: (2.0 * (w * x + y * z)).atan2(1.0 - 2.0 * (x * x + y * y)),
        }
    }
}

/// Composes the augmentation rotation with an orientation quaternion.
/// The input is renormalized first; the zero quaternion is rejected.
pub fn quat_rotate(q: Quaternion, angles: RotationAngles) -> Result<Quaternion> {
    let q = q.normalized()?;
    (Quaternion::from_angles(angles) * q).normalized()
}

/// A rotation held both as a matrix and as a quaternion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation {
    pub matrix: Matrix3,
    pub quaternion: Quaternion,
}

impl Rotation {
    pub fn from_angles(angles: RotationAngles) -> Self {
        Rotation {
            matrix: rotation_matrix(angles),
            quaternion: Quaternion::from_angles(angles),
        }
    }

    pub fn from_matrix(matrix: Matrix3) -> Self {
        Rotation {
            matrix,
            quaternion: Quaternion::from_matrix(&matrix),
        }
    }

    pub fn inverse(&self) -> Self {
        Rotation {
            matrix: transpose(&self.matrix),
            quaternion: self.quaternion.conjugate(),
        }
    }
}

/// Rotates every three-axis sensor row by `R` and left-composes orientation
/// quaternions with `R`. Pressure is left untouched.
pub fn apply_rotation(sample: &SensorSample, rotation: &Rotation) -> Result<SensorSample> {
    let mut out = sample.clone();
    for (&modality, data) in out.modalities.iter_mut() {
        if modality.is_vector() {
            for r in 0..data.rows() {
                let row = data.row_mut(r);
                let v = mat_vec(&rotation.matrix, [row[0], row[1], row[2]]);
                row.copy_from_slice(&v);
            }
        } else if modality == Modality::Orientation {
            for r in 0..data.rows() {
                let row = data.row_mut(r);
                let q = Quaternion::from_slice(row).normalized()?;
                let rotated = (rotation.quaternion * q).normalized()?;
                row.copy_from_slice(&rotated.to_array());
            }
        }
    }
    Ok(out)
}

pub fn apply_random_rotation(sample: &SensorSample, angles: RotationAngles) -> Result<SensorSample> {
    apply_rotation(sample, &Rotation::from_angles(angles))
}
