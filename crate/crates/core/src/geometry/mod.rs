//! Calibrated two-view geometry.
//!
//! Everything here works in normalized image coordinates: the first camera
//! is fixed at `[I | 0]` and the second camera maps a camera-1 point `X` to
//! `R·X + t`. Essential matrices follow `E = [t]× R`, so corresponding
//! points satisfy `x2ᵀ E x1 = 0` with homogeneous `z = 1`.

mod decompose;
mod five_point;
mod homography;
mod ransac;
mod triangulate;

pub use decompose::{decompose_essential, pose_candidates};
pub use five_point::essential_from_five;
pub use homography::{fit_homography_ratio, homography_from_four};
pub use ransac::{ransac_relative_pose, RansacConfig};
pub use triangulate::{triangulate, triangulate_linear, PARALLEL_RAY_EPS};

use nalgebra::{Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Minimum depth accepted by [`project`].
pub const DEPTH_EPS: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("degenerate configuration: {0}")]
    DegenerateConfiguration(&'static str),
    #[error("no pose candidate places a strict majority of {support} support points in front of both cameras (best {best})")]
    CheiralityFailure { support: usize, best: usize },
    #[error("need at least {needed} correspondences, got {got}")]
    InsufficientCorrespondences { needed: usize, got: usize },
    #[error("no consensus: best model has {inliers} inliers, {required} required")]
    NoConsensus { inliers: usize, required: usize },
    #[error("point is behind the camera (depth {depth})")]
    BehindCamera { depth: f64 },
    #[error("rays are parallel (angle {angle} rad)")]
    ParallelRays { angle: f64 },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

/// Pose of camera 2 relative to camera 1, `P2 = [R | t]`.
///
/// `translation` has unit norm except for [`CameraPose::identity`], which
/// stands for the reference camera `[I | 0]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl CameraPose {
    /// Validates orthonormality and normalizes the translation direction.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        let ortho = (rotation.transpose() * rotation - Matrix3::identity()).amax();
        let det = rotation.determinant();
        if ortho > 1e-9 || (det - 1.0).abs() > 1e-9 {
            return Err(GeometryError::InvalidConfig(format!(
                "rotation not in SO(3): orthogonality error {ortho:e}, det {det}"
            )));
        }
        let n = translation.norm();
        if !(n > 0.0) || !n.is_finite() {
            return Err(GeometryError::InvalidConfig("translation direction must be non-zero".into()));
        }
        Ok(Self {
            rotation,
            translation: translation / n,
        })
    }

    pub(crate) fn from_parts_unchecked(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self { rotation, translation }
    }

    /// The reference camera `[I | 0]`.
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn transform(&self, point: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * point + self.translation
    }

    pub fn essential(&self) -> Matrix3<f64> {
        skew(&self.translation) * self.rotation
    }
}

/// One correspondence `(x1, y1) ↔ (x2, y2)` in normalized coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct Correspondence {
    pub x1: Vector2<f64>,
    pub x2: Vector2<f64>,
}

impl Correspondence {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self {
            x1: Vector2::new(x1, y1),
            x2: Vector2::new(x2, y2),
        }
    }

    pub fn h1(&self) -> Vector3<f64> {
        Vector3::new(self.x1.x, self.x1.y, 1.0)
    }

    pub fn h2(&self) -> Vector3<f64> {
        Vector3::new(self.x2.x, self.x2.y, 1.0)
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.x1.x, self.x1.y, self.x2.x, self.x2.y]
    }
}

impl From<[f64; 4]> for Correspondence {
    fn from(v: [f64; 4]) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }
}

impl From<Correspondence> for [f64; 4] {
    fn from(c: Correspondence) -> Self {
        c.as_array()
    }
}

/// `n` correspondences, stored row-wise as `(x1, y1, x2, y2)`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CorrespondenceSet {
    pub points: Vec<Correspondence>,
}

impl CorrespondenceSet {
    pub fn new(points: Vec<Correspondence>) -> Self {
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self::new(indices.iter().map(|&i| self.points[i]).collect())
    }

    pub fn is_finite(&self) -> bool {
        self.points.iter().all(|c| c.as_array().iter().all(|v| v.is_finite()))
    }
}

impl FromIterator<Correspondence> for CorrespondenceSet {
    fn from_iter<I: IntoIterator<Item = Correspondence>>(iter: I) -> Self {
        Self::new(iter.into_iter().collect())
    }
}

/// Frobenius-normalized essential matrix with singular values `(σ, σ, 0)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EssentialMatrix {
    matrix: Matrix3<f64>,
}

impl EssentialMatrix {
    /// Projects `m` onto the essential manifold and normalizes it.
    pub fn from_matrix(m: &Matrix3<f64>) -> Option<Self> {
        let svd = m.svd(true, true);
        let (u, v_t) = (svd.u?, svd.v_t?);
        let mut order = [0usize, 1, 2];
        order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
        let s = svd.singular_values;
        if !(s[order[1]] > 0.0) {
            return None;
        }
        let mut d = Vector3::zeros();
        d[order[0]] = 1.0;
        d[order[1]] = 1.0;
        let e = u * Matrix3::from_diagonal(&d) * v_t;
        let e = e / e.norm();
        e.iter().all(|v| v.is_finite()).then_some(Self { matrix: e })
    }

    pub fn from_pose(pose: &CameraPose) -> Option<Self> {
        Self::from_matrix(&pose.essential())
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.matrix
    }
}

/// Cross-product matrix, `skew(a) · b = a × b`.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Perspective projection of a camera-1 point into the camera described by `pose`.
pub fn project(pose: &CameraPose, point: &Vector3<f64>) -> Result<Vector2<f64>, GeometryError> {
    project_camera(&pose.transform(point))
}

/// Perspective division of a point already expressed in the camera frame.
pub fn project_camera(p: &Vector3<f64>) -> Result<Vector2<f64>, GeometryError> {
    if !(p.z > DEPTH_EPS) {
        return Err(GeometryError::BehindCamera { depth: p.z });
    }
    Ok(Vector2::new(p.x / p.z, p.y / p.z))
}

/// First-order (Sampson) distance of a correspondence to the epipolar
/// constraint. Invariant to the sign and scale of `e`.
pub fn epipolar_error(e: &Matrix3<f64>, pair: &Correspondence) -> f64 {
    let x1 = pair.h1();
    let x2 = pair.h2();
    let ex1 = e * x1;
    let etx2 = e.transpose() * x2;
    let num = x2.dot(&ex1);
    if num == 0.0 {
        return 0.0;
    }
    let den = ex1.x * ex1.x + ex1.y * ex1.y + etx2.x * etx2.x + etx2.y * etx2.y;
    if den <= 0.0 {
        return f64::INFINITY;
    }
    num.abs() / den.sqrt()
}

/// Angle of the relative rotation `a · bᵀ`, in radians.
pub fn rotation_angle(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    let r = a * b.transpose();
    // atan2 form keeps precision for tiny angles.
    let w = Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
    let c = r.trace() - 1.0;
    w.norm().atan2(c)
}

/// Angle between two directions, in radians.
pub fn direction_angle(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    a.cross(b).norm().atan2(a.dot(b))
}
