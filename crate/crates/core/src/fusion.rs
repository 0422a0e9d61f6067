//! Per-parameter Gaussian fusion of the geometric and learned estimates.

use thiserror::Error;

use crate::motion::{circular_nearest, idx, wrap_half_closed, wrap_half_open, MotionParams};
use crate::uncertainty::GaussianEstimate;

#[derive(Debug, Error, Clone, Copy, PartialEq)]
pub enum FusionError {
    #[error("both inverse variances are zero")]
    NoInformation,
}

/// Precision-weighted mean and summed precision of two 1-D Gaussians.
pub fn fuse_gaussian_1d(mean_g: f64, ivar_g: f64, mean_d: f64, ivar_d: f64) -> Result<(f64, f64), FusionError> {
    debug_assert!(ivar_g >= 0.0 && ivar_d >= 0.0);
    if ivar_g == 0.0 && ivar_d == 0.0 {
        return Err(FusionError::NoInformation);
    }
    // Exact pass-through when one side carries no information.
    if ivar_g == 0.0 {
        return Ok((mean_d, ivar_d));
    }
    if ivar_d == 0.0 {
        return Ok((mean_g, ivar_g));
    }
    let s = ivar_g + ivar_d;
    Ok(((ivar_g * mean_g + ivar_d * mean_d) / s, s))
}

/// Which parameters are angles fused on the circle.
const CIRCULAR: [bool; 5] = [true, true, true, false, true];

/// Partial derivatives of the fused means w.r.t. the learned branch, with
/// the circular shift held constant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionGradient {
    pub d_mean_d_dnn_mean: [f64; 5],
    pub d_mean_d_dnn_ivar: [f64; 5],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusedPose {
    pub params: MotionParams,
    pub estimate: GaussianEstimate,
    pub gradient: FusionGradient,
}

/// Fuses each pose parameter independently. An invalid geometric estimate
/// contributes no information, leaving the learned estimate unchanged.
/// If neither branch carries information the learned mean is kept with
/// zero precision.
pub fn fuse_pose_full(geo: &GaussianEstimate, dnn: &GaussianEstimate) -> FusedPose {
    let gi = geo.effective_inverse_variances();
    let mut means = [0.0; 5];
    let mut ivars = [0.0; 5];
    let mut d_mean = [0.0; 5];
    let mut d_ivar = [0.0; 5];
    for k in 0..5 {
        let md = dnn.means[k];
        let id = dnn.inverse_variances[k];
        let mg = if CIRCULAR[k] {
            circular_nearest(md, geo.means[k])
        } else {
            geo.means[k]
        };
        let (m, v) = fuse_gaussian_1d(mg, gi[k], md, id).unwrap_or((md, 0.0));
        means[k] = m;
        ivars[k] = v;
        if gi[k] == 0.0 {
            d_mean[k] = 1.0;
        } else if id > 0.0 {
            let s = gi[k] + id;
            d_mean[k] = id / s;
            d_ivar[k] = (md - mg) * gi[k] / (s * s);
        }
    }
    for k in [idx::YAW, idx::PITCH, idx::ROLL] {
        means[k] = wrap_half_closed(means[k]);
    }
    means[idx::BETA] = wrap_half_open(means[idx::BETA]);
    let alpha = means[idx::ALPHA];
    if !(0.0..=std::f64::consts::PI).contains(&alpha) {
        means[idx::ALPHA] = alpha.clamp(0.0, std::f64::consts::PI);
        d_mean[idx::ALPHA] = 0.0;
        d_ivar[idx::ALPHA] = 0.0;
    }
    FusedPose {
        params: MotionParams::from_array(means),
        estimate: GaussianEstimate {
            means,
            inverse_variances: ivars,
            valid: true,
        },
        gradient: FusionGradient {
            d_mean_d_dnn_mean: d_mean,
            d_mean_d_dnn_ivar: d_ivar,
        },
    }
}

pub fn fuse_pose(geo: &GaussianEstimate, dnn: &GaussianEstimate) -> (MotionParams, GaussianEstimate) {
    let f = fuse_pose_full(geo, dnn);
    (f.params, f.estimate)
}
