//! Rigid transforms parameterized by Euler angles and an integer-friendly
//! translation.
//!
//! A transform maps a point `x` of the output (reference) lattice to the
//! sampling location in the input (floating) lattice:
//!
//! ```text
//! T(x) = R * (x + t - c) + c
//! ```
//!
//! where `R = Rx(θx) · Ry(θy) · Rz(θz)` rotates about x, then the resulting y,
//! then the resulting z axis, `t` is the translation and `c` the rotation
//! center. Translating before rotating keeps `t` equal to the displacement
//! found by the exhaustive shift search.

use serde::{Deserialize, Serialize};

pub type Mat3 = [[f64; 3]; 3];

/// Wraps an angle in degrees to `[-180, 180)`.
pub fn normalize_angle(deg: f64) -> f64 {
    let r = (deg + 180.0).rem_euclid(360.0) - 180.0;
    // rem_euclid can round up to exactly 360 for tiny negative inputs
    if r >= 180.0 {
        r - 360.0
    } else {
        r
    }
}

/// Rotation matrix for intrinsic x-y'-z'' Euler angles in degrees.
pub fn rotation_matrix(euler_deg: [f64; 3]) -> Mat3 {
    let [a, b, g] = euler_deg.map(f64::to_radians);
    let (sa, ca) = sin_cos(a);
    let (sb, cb) = sin_cos(b);
    let (sg, cg) = sin_cos(g);
    let rx = [[1.0, 0.0, 0.0], [0.0, ca, -sa], [0.0, sa, ca]];
    let ry = [[cb, 0.0, sb], [0.0, 1.0, 0.0], [-sb, 0.0, cb]];
    let rz = [[cg, -sg, 0.0], [sg, cg, 0.0], [0.0, 0.0, 1.0]];
    mat_mul(&mat_mul(&rx, &ry), &rz)
}

// Exact values at multiples of 90 degrees keep axis-aligned rotations lossless.
fn sin_cos(rad: f64) -> (f64, f64) {
    let quarter = rad / std::f64::consts::FRAC_PI_2;
    if quarter == quarter.round() {
        match (quarter.round() as i64).rem_euclid(4) {
            0 => (0.0, 1.0),
            1 => (1.0, 0.0),
            2 => (0.0, -1.0),
            _ => (-1.0, 0.0),
        }
    } else {
        rad.sin_cos()
    }
}

/// Recovers intrinsic x-y'-z'' Euler angles (degrees) from a rotation matrix.
pub fn euler_from_matrix(r: &Mat3) -> [f64; 3] {
    // R = Rx Ry Rz gives r[0][2] = sin(b), r[0][0] = cb cg, r[0][1] = -cb sg,
    // r[1][2] = -sa cb, r[2][2] = ca cb.
    let sb = r[0][2].clamp(-1.0, 1.0);
    let b = sb.asin();
    let (a, g) = if sb.abs() < 1.0 - 1e-12 {
        (
            (-r[1][2]).atan2(r[2][2]),
            (-r[0][1]).atan2(r[0][0]),
        )
    } else {
        // gimbal lock: only a +/- g is determined
        (r[2][1].atan2(r[1][1]), 0.0)
    };
    [a, b, g].map(|x| normalize_angle(x.to_degrees()))
}

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

pub fn mat_vec(a: &Mat3, v: [f64; 3]) -> [f64; 3] {
    [0, 1, 2].map(|i| a[i][0] * v[0] + a[i][1] * v[1] + a[i][2] * v[2])
}

pub fn transpose(a: &Mat3) -> Mat3 {
    [0, 1, 2].map(|i| [a[0][i], a[1][i], a[2][i]])
}

/// Rotation (Euler degrees), translation (voxels) and rotation center (voxels).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    pub euler_deg: [f64; 3],
    pub translation_vx: [f64; 3],
    pub center_vx: [f64; 3],
}

impl RigidTransform {
    pub fn identity() -> Self {
        RigidTransform {
            euler_deg: [0.0; 3],
            translation_vx: [0.0; 3],
            center_vx: [0.0; 3],
        }
    }

    /// Angles are wrapped to `[-180, 180)`.
    pub fn new(euler_deg: [f64; 3], translation_vx: [f64; 3], center_vx: [f64; 3]) -> Self {
        RigidTransform {
            euler_deg: euler_deg.map(normalize_angle),
            translation_vx,
            center_vx,
        }
    }

    pub fn translation(t: [f64; 3]) -> Self {
        RigidTransform {
            translation_vx: t,
            ..Self::identity()
        }
    }

    pub fn rotation_about(euler_deg: [f64; 3], center_vx: [f64; 3]) -> Self {
        Self::new(euler_deg, [0.0; 3], center_vx)
    }

    pub fn matrix(&self) -> Mat3 {
        rotation_matrix(self.euler_deg)
    }

    /// Maps an output-lattice point to its input-lattice sampling location.
    pub fn apply(&self, x: [f64; 3]) -> [f64; 3] {
        self.apply_with(&self.matrix(), x)
    }

    #[inline]
    pub(crate) fn apply_with(&self, r: &Mat3, x: [f64; 3]) -> [f64; 3] {
        let c = self.center_vx;
        let t = self.translation_vx;
        let d = [0, 1, 2].map(|i| x[i] + t[i] - c[i]);
        let rd = mat_vec(r, d);
        [0, 1, 2].map(|i| rd[i] + c[i])
    }

    /// The transform undoing `self`, expressed about the same center.
    pub fn inverse(&self) -> Self {
        let r = self.matrix();
        let rt = transpose(&r);
        let t = mat_vec(&r, self.translation_vx).map(|v| -v);
        RigidTransform {
            euler_deg: euler_from_matrix(&rt),
            translation_vx: t,
            center_vx: self.center_vx,
        }
    }
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}
