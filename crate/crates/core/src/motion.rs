//! Motion parameterization shared by bundle adjustment, fusion and the
//! learned branch.
//!
//! Rotation uses yaw-pitch-roll Euler angles with the fixed convention
//! `R = R_y(yaw) · R_x(pitch) · R_z(roll)` (camera-frame vertical is `y`).
//! Translation direction uses sphere angles
//! `t(α, β) = (cos α, sin α cos β, sin α sin β)` with `α ∈ [0, π]` and
//! `β ∈ [−π, π)`.

use std::f64::consts::{FRAC_PI_2, PI, TAU};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::CameraPose;

/// Below this `sin α` the azimuth `β` is indeterminate and pinned to 0.
pub const SPHERE_SINGULAR_EPS: f64 = 1e-9;
/// Pitch within this distance of ±π/2 is treated as gimbal lock.
pub const GIMBAL_EPS: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MotionError {
    #[error("cannot extract sphere angles from a zero vector")]
    ZeroVector,
    #[error("rotation is within {GIMBAL_EPS} rad of gimbal lock (pitch = {pitch})")]
    GimbalLock { pitch: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SphereAngles {
    pub alpha: f64,
    pub beta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EulerAngles {
    pub yaw: f64,
    pub pitch: f64,
    pub roll: f64,
}

/// Index of each fusion parameter in 5-vectors (`[yaw, pitch, roll, α, β]`).
pub mod idx {
    pub const YAW: usize = 0;
    pub const PITCH: usize = 1;
    pub const ROLL: usize = 2;
    pub const ALPHA: usize = 3;
    pub const BETA: usize = 4;
}

pub const PARAM_NAMES: [&str; 5] = ["yaw", "pitch", "roll", "alpha", "beta"];

/// The five fused scalars `{yaw, pitch, roll, α, β}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotionParams {
    pub yaw: f64,
    pub pitch: f64,
    pub roll: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl MotionParams {
    pub fn from_array(v: [f64; 5]) -> Self {
        Self {
            yaw: v[0],
            pitch: v[1],
            roll: v[2],
            alpha: v[3],
            beta: v[4],
        }
    }

    pub fn to_array(self) -> [f64; 5] {
        [self.yaw, self.pitch, self.roll, self.alpha, self.beta]
    }

    pub fn euler(self) -> EulerAngles {
        EulerAngles {
            yaw: self.yaw,
            pitch: self.pitch,
            roll: self.roll,
        }
    }

    pub fn sphere(self) -> SphereAngles {
        SphereAngles {
            alpha: self.alpha,
            beta: self.beta,
        }
    }

    pub fn from_parts(e: EulerAngles, s: SphereAngles) -> Self {
        Self {
            yaw: e.yaw,
            pitch: e.pitch,
            roll: e.roll,
            alpha: s.alpha,
            beta: s.beta,
        }
    }

    /// Rotation and unit translation described by these parameters.
    pub fn to_pose(self) -> CameraPose {
        CameraPose::from_parts_unchecked(rotation_from_euler(self.euler()), vector_from_sphere(self.sphere()))
    }

    /// Decomposes a pose into fusion parameters.
    pub fn from_pose(pose: &CameraPose) -> Result<Self, MotionError> {
        let e = euler_from_rotation(&pose.rotation)?;
        let s = sphere_from_vector(&pose.translation)?;
        Ok(Self::from_parts(e, s))
    }
}

pub fn sphere_from_vector(t: &Vector3<f64>) -> Result<SphereAngles, MotionError> {
    let norm = t.norm();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(MotionError::ZeroVector);
    }
    let u = t / norm;
    let alpha = u.x.clamp(-1.0, 1.0).acos();
    let beta = if alpha.sin() < SPHERE_SINGULAR_EPS {
        0.0
    } else {
        wrap_half_open(u.z.atan2(u.y))
    };
    Ok(SphereAngles { alpha, beta })
}

pub fn vector_from_sphere(s: SphereAngles) -> Vector3<f64> {
    let (sa, ca) = s.alpha.sin_cos();
    let (sb, cb) = s.beta.sin_cos();
    Vector3::new(ca, sa * cb, sa * sb)
}

/// Partial derivatives of `t(α, β)` with respect to α and β.
pub fn sphere_jacobian(s: SphereAngles) -> (Vector3<f64>, Vector3<f64>) {
    let (sa, ca) = s.alpha.sin_cos();
    let (sb, cb) = s.beta.sin_cos();
    (Vector3::new(-sa, ca * cb, ca * sb), Vector3::new(0.0, -sa * sb, sa * cb))
}

pub fn rot_x(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

pub fn rot_y(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

pub fn rot_z(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

fn d_rot_x(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(0.0, 0.0, 0.0, 0.0, -s, -c, 0.0, c, -s)
}

fn d_rot_y(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(-s, 0.0, c, 0.0, 0.0, 0.0, -c, 0.0, -s)
}

fn d_rot_z(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(-s, -c, 0.0, c, -s, 0.0, 0.0, 0.0, 0.0)
}

pub fn rotation_from_euler(e: EulerAngles) -> Matrix3<f64> {
    rot_y(e.yaw) * rot_x(e.pitch) * rot_z(e.roll)
}

/// Partial derivatives of the rotation with respect to `(yaw, pitch, roll)`.
pub fn euler_jacobian(e: EulerAngles) -> [Matrix3<f64>; 3] {
    let (ry, rx, rz) = (rot_y(e.yaw), rot_x(e.pitch), rot_z(e.roll));
    [
        d_rot_y(e.yaw) * rx * rz,
        ry * d_rot_x(e.pitch) * rz,
        ry * rx * d_rot_z(e.roll),
    ]
}

pub fn euler_from_rotation(r: &Matrix3<f64>) -> Result<EulerAngles, MotionError> {
    let e = euler_from_rotation_clamped(r);
    if e.pitch.abs() > FRAC_PI_2 - GIMBAL_EPS {
        return Err(MotionError::GimbalLock { pitch: e.pitch });
    }
    Ok(e)
}

/// Euler extraction that never fails; at gimbal lock the roll is set to 0.
pub fn euler_from_rotation_clamped(r: &Matrix3<f64>) -> EulerAngles {
    // R[1,2] = -sin(pitch), R[1,0] = cos(pitch) sin(roll), R[1,1] = cos(pitch) cos(roll)
    // R[0,2] = sin(yaw) cos(pitch), R[2,2] = cos(yaw) cos(pitch)
    let cp = r[(1, 0)].hypot(r[(1, 1)]);
    let pitch = (-r[(1, 2)]).atan2(cp);
    if cp < 1e-12 {
        // yaw and roll couple; attribute everything to yaw.
        let yaw = (-r[(2, 0)]).atan2(r[(0, 0)]);
        return EulerAngles {
            yaw: wrap_half_closed(yaw),
            pitch,
            roll: 0.0,
        };
    }
    let yaw = r[(0, 2)].atan2(r[(2, 2)]);
    let roll = r[(1, 0)].atan2(r[(1, 1)]);
    EulerAngles {
        yaw: wrap_half_closed(yaw),
        pitch,
        roll: wrap_half_closed(roll),
    }
}

/// Returns `reference + 2kπ`, `k ∈ {−1, 0, 1}`, closest to `target`.
pub fn circular_nearest(target: f64, reference: f64) -> f64 {
    let mut best = reference;
    let mut best_dist = (target - reference).abs();
    for candidate in [reference - TAU, reference + TAU] {
        let d = (target - candidate).abs();
        if d < best_dist {
            best = candidate;
            best_dist = d;
        }
    }
    best
}

/// Wraps an angle into `[−π, π)`.
pub fn wrap_half_open(a: f64) -> f64 {
    if (-PI..PI).contains(&a) {
        return a;
    }
    let w = (a + PI).rem_euclid(TAU) - PI;
    if w >= PI {
        w - TAU
    } else {
        w
    }
}

/// Wraps an angle into `(−π, π]`.
pub fn wrap_half_closed(a: f64) -> f64 {
    if a > -PI && a <= PI {
        return a;
    }
    let w = -wrap_half_open(-a);
    if w <= -PI {
        w + TAU
    } else {
        w
    }
}
