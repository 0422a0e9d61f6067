//! First-order uncertainty of the geometric solution: the information
//! matrix `Λ = JᵀJ / σ²` and per-parameter inverse variances obtained by
//! Schur complement (the marginal precision of one parameter).

use nalgebra::{DMatrix, Matrix3, Matrix4, SMatrix, Vector4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bundle::{BlockJacobian, OptimizedEstimate, POSE_DIM};

/// Smallest admissible eigenvalue of an equilibrated block being inverted.
pub const PD_EPS: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum UncertaintyError {
    #[error("information matrix is numerically singular ({0})")]
    SingularInformation(&'static str),
    #[error("parameter index {index} out of range for dimension {dim}")]
    IndexOutOfRange { index: usize, dim: usize },
    #[error("estimate has not converged")]
    NotConverged,
    #[error("measurement sigma must be positive and finite, got {0}")]
    InvalidSigma(f64),
}

/// Per-parameter Gaussian over `{yaw, pitch, roll, α, β}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianEstimate {
    pub means: [f64; 5],
    pub inverse_variances: [f64; 5],
    pub valid: bool,
}

impl GaussianEstimate {
    pub fn invalid() -> Self {
        Self {
            means: [0.0; 5],
            inverse_variances: [0.0; 5],
            valid: false,
        }
    }

    /// Inverse variances as seen by fusion: zero when the estimate is invalid.
    pub fn effective_inverse_variances(&self) -> [f64; 5] {
        if self.valid {
            self.inverse_variances
        } else {
            [0.0; 5]
        }
    }

    pub fn total_rotation_ivar(&self) -> f64 {
        self.inverse_variances[..3].iter().sum()
    }

    pub fn total_translation_ivar(&self) -> f64 {
        self.inverse_variances[3..].iter().sum()
    }
}

/// Dense `JᵀJ`, symmetrized.
pub fn information_matrix(jacobian: &DMatrix<f64>) -> DMatrix<f64> {
    let m = jacobian.ncols();
    let mut info = jacobian.tr_mul(jacobian);
    for i in 0..m {
        for j in 0..i {
            let v = 0.5 * (info[(i, j)] + info[(j, i)]);
            info[(i, j)] = v;
            info[(j, i)] = v;
        }
    }
    info
}

/// `JᵀJ` for the two-view Jacobian kept in block form: the pose block,
/// one pose–point coupling strip per point and one 3×3 block per point.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockInformation {
    pub pose: SMatrix<f64, 5, 5>,
    pub coupling: Vec<SMatrix<f64, 5, 3>>,
    pub points: Vec<Matrix3<f64>>,
}

impl BlockJacobian {
    pub fn information(&self) -> BlockInformation {
        let mut pose = SMatrix::<f64, 5, 5>::zeros();
        let mut coupling = Vec::with_capacity(self.n_points());
        let mut points = Vec::with_capacity(self.n_points());
        for b in &self.blocks {
            pose += b.cam2_pose.transpose() * b.cam2_pose;
            coupling.push(b.cam2_pose.transpose() * b.cam2_point);
            let p = b.cam1_point.transpose() * b.cam1_point + b.cam2_point.transpose() * b.cam2_point;
            points.push(0.5 * (p + p.transpose()));
        }
        BlockInformation {
            pose: 0.5 * (pose + pose.transpose()),
            coupling,
            points,
        }
    }
}

impl BlockInformation {
    pub fn dim(&self) -> usize {
        POSE_DIM + 3 * self.points.len()
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            pose: self.pose * c,
            coupling: self.coupling.iter().map(|m| m * c).collect(),
            points: self.points.iter().map(|m| m * c).collect(),
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut d = DMatrix::zeros(self.dim(), self.dim());
        d.fixed_view_mut::<5, 5>(0, 0).copy_from(&self.pose);
        for (i, (c, p)) in self.coupling.iter().zip(&self.points).enumerate() {
            let k = POSE_DIM + 3 * i;
            d.fixed_view_mut::<5, 3>(0, k).copy_from(c);
            d.fixed_view_mut::<3, 5>(k, 0).copy_from(&c.transpose());
            d.fixed_view_mut::<3, 3>(k, k).copy_from(p);
        }
        d
    }

    /// Equilibrated pose information with all points eliminated, plus the
    /// equilibration factors `sqrt(Λ_kk)` of the pose parameters.
    fn reduced_pose(&self) -> Result<(SMatrix<f64, 5, 5>, [f64; 5]), UncertaintyError> {
        let pose_scale: [f64; 5] = std::array::from_fn(|k| self.pose[(k, k)].sqrt());
        let inv_pose: [f64; 5] = std::array::from_fn(|k| if pose_scale[k] > 0.0 { 1.0 / pose_scale[k] } else { 0.0 });
        let mut s = SMatrix::<f64, 5, 5>::from_fn(|r, c| self.pose[(r, c)] * inv_pose[r] * inv_pose[c]);
        for (c, p) in self.coupling.iter().zip(&self.points) {
            let ps: [f64; 3] = std::array::from_fn(|k| p[(k, k)].sqrt());
            if ps.iter().any(|v| !(*v > 0.0)) {
                return Err(UncertaintyError::SingularInformation("point block has a zero diagonal"));
            }
            let p_eq = Matrix3::from_fn(|r, q| p[(r, q)] / (ps[r] * ps[q]));
            check_pd3(&p_eq)?;
            let c_eq = SMatrix::<f64, 5, 3>::from_fn(|r, q| c[(r, q)] * inv_pose[r] / ps[q]);
            let p_inv = p_eq
                .cholesky()
                .ok_or(UncertaintyError::SingularInformation("point block not positive definite"))?
                .inverse();
            s -= c_eq * p_inv * c_eq.transpose();
        }
        Ok((0.5 * (s + s.transpose()), pose_scale))
    }

    /// Marginal precision of parameter `index` (pose indices only).
    pub fn inverse_variance(&self, index: usize) -> Result<f64, UncertaintyError> {
        if index >= POSE_DIM {
            return Err(UncertaintyError::IndexOutOfRange { index, dim: POSE_DIM });
        }
        let (s, scale) = self.reduced_pose()?;
        pose_marginal(&s, &scale, index)
    }

    /// Marginal precisions of all five pose parameters.
    pub fn pose_inverse_variances(&self) -> Result<[f64; 5], UncertaintyError> {
        let (s, scale) = self.reduced_pose()?;
        let mut out = [0.0; 5];
        for (i, o) in out.iter_mut().enumerate() {
            *o = pose_marginal(&s, &scale, i)?;
        }
        Ok(out)
    }
}

fn check_pd3(m: &Matrix3<f64>) -> Result<(), UncertaintyError> {
    let min = m.symmetric_eigenvalues().min();
    if !(min > PD_EPS) {
        return Err(UncertaintyError::SingularInformation("point block"));
    }
    Ok(())
}

/// Schur complement of one entry of the equilibrated 5×5 pose information,
/// mapped back to unscaled units.
fn pose_marginal(s: &SMatrix<f64, 5, 5>, scale: &[f64; 5], index: usize) -> Result<f64, UncertaintyError> {
    if scale[index] == 0.0 {
        return Ok(0.0);
    }
    let others: Vec<usize> = (0..5).filter(|&k| k != index).collect();
    let sjj = Matrix4::from_fn(|r, c| s[(others[r], others[c])]);
    let sji = Vector4::from_fn(|r, _| s[(others[r], index)]);
    if others.iter().any(|&k| scale[k] == 0.0) {
        return Err(UncertaintyError::SingularInformation("pose parameter without information"));
    }
    let min = sjj.symmetric_eigenvalues().min();
    if !(min > PD_EPS) {
        return Err(UncertaintyError::SingularInformation("reduced pose block"));
    }
    let chol = sjj.cholesky().ok_or(UncertaintyError::SingularInformation(
        "reduced pose block not positive definite",
    ))?;
    let v = s[(index, index)] - sji.dot(&chol.solve(&sji));
    Ok(v.max(0.0) * scale[index] * scale[index])
}

/// Tries to read `info` as a two-view information matrix (5 pose
/// parameters followed by mutually uncoupled 3×3 point blocks).
fn as_block_information(info: &DMatrix<f64>) -> Option<BlockInformation> {
    let m = info.nrows();
    if m < POSE_DIM || !(m - POSE_DIM).is_multiple_of(3) {
        return None;
    }
    let n = (m - POSE_DIM) / 3;
    for a in 0..n {
        for b in 0..n {
            if a != b
                && info
                    .fixed_view::<3, 3>(POSE_DIM + 3 * a, POSE_DIM + 3 * b)
                    .iter()
                    .any(|v| *v != 0.0)
            {
                return None;
            }
        }
    }
    Some(BlockInformation {
        pose: info.fixed_view::<5, 5>(0, 0).into_owned(),
        coupling: (0..n)
            .map(|i| info.fixed_view::<5, 3>(0, POSE_DIM + 3 * i).into_owned())
            .collect(),
        points: (0..n)
            .map(|i| info.fixed_view::<3, 3>(POSE_DIM + 3 * i, POSE_DIM + 3 * i).into_owned())
            .collect(),
    })
}

/// `Λ_ii − Λ_iJ Λ_JJ⁻¹ Λ_Ji`, with `J` every other parameter.
///
/// Point blocks are eliminated first when `info` has the two-view block
/// structure and `index` is a pose parameter; otherwise a dense
/// elimination is used.
pub fn parameter_inverse_variance(info: &DMatrix<f64>, index: usize) -> Result<f64, UncertaintyError> {
    let m = info.nrows();
    assert_eq!(m, info.ncols(), "information matrix must be square");
    if index >= m {
        return Err(UncertaintyError::IndexOutOfRange { index, dim: m });
    }
    if index < POSE_DIM {
        if let Some(block) = as_block_information(info) {
            return block.inverse_variance(index);
        }
    }
    dense_inverse_variance(info, index)
}

fn dense_inverse_variance(info: &DMatrix<f64>, index: usize) -> Result<f64, UncertaintyError> {
    let m = info.nrows();
    let scale: Vec<f64> = (0..m).map(|k| info[(k, k)].max(0.0).sqrt()).collect();
    if scale[index] == 0.0 {
        return Ok(0.0);
    }
    if m == 1 {
        return Ok(info[(0, 0)]);
    }
    let others: Vec<usize> = (0..m).filter(|&k| k != index).collect();
    if others.iter().any(|&k| scale[k] == 0.0) {
        return Err(UncertaintyError::SingularInformation("parameter without information"));
    }
    let k = others.len();
    let sjj = DMatrix::from_fn(k, k, |r, c| {
        let (a, b) = (others[r], others[c]);
        info[(a, b)] / (scale[a] * scale[b])
    });
    let sji = DMatrix::from_fn(k, 1, |r, _| info[(others[r], index)] / (scale[others[r]] * scale[index]));
    let min = sjj.clone().symmetric_eigenvalues().min();
    if !(min > PD_EPS) {
        return Err(UncertaintyError::SingularInformation("remaining block"));
    }
    let chol = sjj
        .cholesky()
        .ok_or(UncertaintyError::SingularInformation("remaining block not positive definite"))?;
    let v = 1.0 - sji.dot(&chol.solve(&sji));
    Ok(v.max(0.0) * scale[index] * scale[index])
}

/// Geometric Gaussian estimate with unit measurement noise.
pub fn pose_uncertainty(estimate: &OptimizedEstimate) -> Result<GaussianEstimate, UncertaintyError> {
    pose_uncertainty_with(estimate, 1.0)
}

/// Geometric Gaussian estimate with `Λ = JᵀJ / sigma_meas²`. Any failed
/// elimination marks the whole estimate invalid.
pub fn pose_uncertainty_with(estimate: &OptimizedEstimate, sigma_meas: f64) -> Result<GaussianEstimate, UncertaintyError> {
    if !estimate.converged {
        return Err(UncertaintyError::NotConverged);
    }
    if !(sigma_meas > 0.0 && sigma_meas.is_finite()) {
        return Err(UncertaintyError::InvalidSigma(sigma_meas));
    }
    let mut info = estimate.jacobian.information();
    if sigma_meas != 1.0 {
        info = info.scaled(1.0 / (sigma_meas * sigma_meas));
    }
    let means = estimate.params.pose.to_array();
    Ok(match info.pose_inverse_variances() {
        Ok(ivars) if ivars.iter().all(|v| v.is_finite()) => GaussianEstimate {
            means,
            inverse_variances: ivars,
            valid: true,
        },
        _ => GaussianEstimate {
            means,
            inverse_variances: [0.0; 5],
            valid: false,
        },
    })
}

/// Residual standard deviation implied by the final cost, using the
/// `4n − (5 + 3n)` degrees of freedom of the two-view problem.
pub fn a_posteriori_sigma(estimate: &OptimizedEstimate) -> Option<f64> {
    let n = estimate.params.points.len();
    let dof = (4 * n).checked_sub(POSE_DIM + 3 * n)?;
    if dof == 0 {
        return None;
    }
    let s = (estimate.final_cost / dof as f64).sqrt();
    (s > 0.0 && s.is_finite()).then_some(s)
}
