//! Two-view bundle adjustment over `{yaw, pitch, roll, α, β}` plus the
//! scene points, with camera 1 pinned at `[I | 0]`.
//!
//! Residuals are laid out per point as
//! `[x1 − π(X), x2 − π(R·X + t)]` (four rows). The Jacobian is kept in
//! block form: camera-1 rows only touch the point's own three columns, and
//! camera-2 rows touch the five pose columns plus the point's columns.

use nalgebra::{DMatrix, DVector, Matrix2x3, Matrix3, SMatrix, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{triangulate, CameraPose, CorrespondenceSet, GeometryError, DEPTH_EPS};
use crate::motion::{
    euler_from_rotation_clamped, euler_jacobian, rot_x, rot_y, rot_z, rotation_from_euler, sphere_from_vector, sphere_jacobian,
    vector_from_sphere, MotionParams, GIMBAL_EPS,
};

pub const POSE_DIM: usize = 5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BaError {
    #[error("need at least {needed} usable inliers, got {got}")]
    InsufficientCorrespondences { needed: usize, got: usize },
    #[error("optimization diverged (non-finite cost at iteration {iteration})")]
    DivergedOptimization { iteration: usize },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaParameterVector {
    pub pose: MotionParams,
    pub points: Vec<Vector3<f64>>,
}

impl BaParameterVector {
    pub fn dim(&self) -> usize {
        POSE_DIM + 3 * self.points.len()
    }

    pub fn to_vector(&self) -> DVector<f64> {
        let mut v = DVector::zeros(self.dim());
        for (i, p) in self.pose.to_array().iter().enumerate() {
            v[i] = *p;
        }
        for (i, x) in self.points.iter().enumerate() {
            v.fixed_rows_mut::<3>(POSE_DIM + 3 * i).copy_from(x);
        }
        v
    }

    pub fn from_vector(v: &DVector<f64>) -> Self {
        let n = (v.len() - POSE_DIM) / 3;
        Self {
            pose: MotionParams::from_array([v[0], v[1], v[2], v[3], v[4]]),
            points: (0..n).map(|i| v.fixed_rows::<3>(POSE_DIM + 3 * i).into_owned()).collect(),
        }
    }
}

/// Jacobian rows of one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointBlock {
    /// d(camera-1 residual)/d(point).
    pub cam1_point: Matrix2x3<f64>,
    /// d(camera-2 residual)/d(pose).
    pub cam2_pose: SMatrix<f64, 2, 5>,
    /// d(camera-2 residual)/d(point).
    pub cam2_point: Matrix2x3<f64>,
}

impl PointBlock {
    pub fn scaled(&self, c: f64) -> Self {
        Self {
            cam1_point: self.cam1_point * c,
            cam2_pose: self.cam2_pose * c,
            cam2_point: self.cam2_point * c,
        }
    }
}

/// Block-sparse `(4n) × (5 + 3n)` Jacobian.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockJacobian {
    pub blocks: Vec<PointBlock>,
}

impl BlockJacobian {
    pub fn n_points(&self) -> usize {
        self.blocks.len()
    }

    pub fn nrows(&self) -> usize {
        4 * self.blocks.len()
    }

    pub fn ncols(&self) -> usize {
        POSE_DIM + 3 * self.blocks.len()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut j = DMatrix::zeros(self.nrows(), self.ncols());
        for (i, b) in self.blocks.iter().enumerate() {
            let (r, c) = (4 * i, POSE_DIM + 3 * i);
            j.fixed_view_mut::<2, 3>(r, c).copy_from(&b.cam1_point);
            j.fixed_view_mut::<2, 5>(r + 2, 0).copy_from(&b.cam2_pose);
            j.fixed_view_mut::<2, 3>(r + 2, c).copy_from(&b.cam2_point);
        }
        j
    }
}

/// Fixed rotation/translation offsets composed with the Euler/sphere chart,
/// used to move away from gimbal lock or the poles of the sphere chart.
#[derive(Debug, Clone, Copy)]
struct Chart {
    rot_offset: Option<Matrix3<f64>>,
    trans_offset: Option<Matrix3<f64>>,
}

impl Chart {
    const IDENTITY: Chart = Chart {
        rot_offset: None,
        trans_offset: None,
    };

    fn pose(&self, p: &MotionParams) -> (Matrix3<f64>, Vector3<f64>) {
        let mut r = rotation_from_euler(p.euler());
        if let Some(q) = &self.rot_offset {
            r *= q;
        }
        let mut t = vector_from_sphere(p.sphere());
        if let Some(q) = &self.trans_offset {
            t = q * t;
        }
        (r, t)
    }

    fn derivatives(&self, p: &MotionParams) -> ([Matrix3<f64>; 3], [Vector3<f64>; 2]) {
        let mut dr = euler_jacobian(p.euler());
        if let Some(q) = &self.rot_offset {
            for d in dr.iter_mut() {
                *d *= q;
            }
        }
        let (mut da, mut db) = sphere_jacobian(p.sphere());
        if let Some(q) = &self.trans_offset {
            da = q * da;
            db = q * db;
        }
        (dr, [da, db])
    }

    /// Chart coordinates of a pose.
    fn params_of(&self, r: &Matrix3<f64>, t: &Vector3<f64>) -> MotionParams {
        let rc = match &self.rot_offset {
            Some(q) => r * q.transpose(),
            None => *r,
        };
        let tc = match &self.trans_offset {
            Some(q) => q.transpose() * t,
            None => *t,
        };
        let e = euler_from_rotation_clamped(&rc);
        let s = sphere_from_vector(&tc).unwrap_or(crate::motion::SphereAngles { alpha: 0.0, beta: 0.0 });
        MotionParams::from_parts(e, s)
    }

    /// Chooses offsets keeping the chart away from its singularities.
    fn anchored_at(r: &Matrix3<f64>, t: &Vector3<f64>) -> Chart {
        let e = euler_from_rotation_clamped(r);
        let rot_offset = (e.pitch.abs() > std::f64::consts::FRAC_PI_2 - GIMBAL_EPS).then(|| {
            let half = std::f64::consts::FRAC_PI_2;
            [rot_x(half), rot_y(half), rot_z(half), rot_x(-half)]
                .into_iter()
                .max_by(|a, b| {
                    let ca = euler_from_rotation_clamped(&(r * a.transpose())).pitch.cos();
                    let cb = euler_from_rotation_clamped(&(r * b.transpose())).pitch.cos();
                    ca.total_cmp(&cb)
                })
                .unwrap()
        });
        let alpha = t.x.clamp(-1.0, 1.0).acos();
        let near_pole = !(GIMBAL_EPS..=std::f64::consts::PI - GIMBAL_EPS).contains(&alpha);
        let trans_offset = near_pole.then(|| {
            let half = std::f64::consts::FRAC_PI_2;
            // Maps the x axis onto the y axis so the pole moves off `t`.
            rot_z(half)
        });
        Chart {
            rot_offset,
            trans_offset,
        }
    }
}

fn projection_jacobian(p: &Vector3<f64>) -> Matrix2x3<f64> {
    let iz = 1.0 / p.z;
    Matrix2x3::new(iz, 0.0, -p.x * iz * iz, 0.0, iz, -p.y * iz * iz)
}

fn evaluate(
    chart: &Chart,
    params: &BaParameterVector,
    corr: &CorrespondenceSet,
    with_jacobian: bool,
) -> Result<(DVector<f64>, Option<BlockJacobian>), GeometryError> {
    assert_eq!(params.points.len(), corr.len(), "one scene point per correspondence");
    let (r, t) = chart.pose(&params.pose);
    let derivs = with_jacobian.then(|| chart.derivatives(&params.pose));
    let mut res = DVector::zeros(4 * corr.len());
    let mut blocks = Vec::with_capacity(if with_jacobian { corr.len() } else { 0 });
    for (i, (x, c)) in params.points.iter().zip(&corr.points).enumerate() {
        if !(x.z > DEPTH_EPS) {
            return Err(GeometryError::BehindCamera { depth: x.z });
        }
        let p2 = r * x + t;
        if !(p2.z > DEPTH_EPS) {
            return Err(GeometryError::BehindCamera { depth: p2.z });
        }
        let r1: Vector2<f64> = c.x1 - x.xy() / x.z;
        let r2: Vector2<f64> = c.x2 - p2.xy() / p2.z;
        res.fixed_rows_mut::<2>(4 * i).copy_from(&r1);
        res.fixed_rows_mut::<2>(4 * i + 2).copy_from(&r2);
        if let Some((dr, dt)) = &derivs {
            let j1 = -projection_jacobian(x);
            let j2 = -projection_jacobian(&p2);
            let mut pose = SMatrix::<f64, 2, 5>::zeros();
            for k in 0..3 {
                pose.set_column(k, &(j2 * (dr[k] * x)));
            }
            pose.set_column(3, &(j2 * dt[0]));
            pose.set_column(4, &(j2 * dt[1]));
            blocks.push(PointBlock {
                cam1_point: j1,
                cam2_pose: pose,
                cam2_point: j2 * r,
            });
        }
    }
    Ok((res, with_jacobian.then_some(BlockJacobian { blocks })))
}

/// Residual vector and analytic Jacobian of the reprojection error.
pub fn residuals_and_jacobian(
    params: &BaParameterVector,
    corr: &CorrespondenceSet,
) -> Result<(DVector<f64>, BlockJacobian), GeometryError> {
    let (r, j) = evaluate(&Chart::IDENTITY, params, corr, true)?;
    Ok((r, j.expect("jacobian requested")))
}

pub fn residuals(params: &BaParameterVector, corr: &CorrespondenceSet) -> Result<DVector<f64>, GeometryError> {
    Ok(evaluate(&Chart::IDENTITY, params, corr, false)?.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LmConfig {
    pub max_iterations: usize,
    pub initial_lambda: f64,
    pub relative_cost_tolerance: f64,
    pub gradient_tolerance: f64,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            initial_lambda: 1e-4,
            relative_cost_tolerance: 1e-10,
            gradient_tolerance: 1e-10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizedEstimate {
    pub params: BaParameterVector,
    pub residuals: DVector<f64>,
    pub jacobian: BlockJacobian,
    pub final_cost: f64,
    pub initial_cost: f64,
    pub converged: bool,
    pub iterations: usize,
    /// Index into the input correspondences of each optimized point.
    pub point_indices: Vec<usize>,
    /// Cost after every accepted step, starting with the initial cost.
    pub cost_history: Vec<f64>,
}

impl OptimizedEstimate {
    pub fn pose(&self) -> CameraPose {
        self.params.pose.to_pose()
    }
}

pub fn refine(initial_pose: &CameraPose, corr: &CorrespondenceSet, inliers: &[bool]) -> Result<OptimizedEstimate, BaError> {
    refine_with(initial_pose, corr, inliers, &LmConfig::default())
}

/// Levenberg–Marquardt refinement of the inlier reprojection error.
pub fn refine_with(
    initial_pose: &CameraPose,
    corr: &CorrespondenceSet,
    inliers: &[bool],
    cfg: &LmConfig,
) -> Result<OptimizedEstimate, BaError> {
    assert_eq!(inliers.len(), corr.len(), "mask length must match correspondences");
    let requested = inliers.iter().filter(|&&b| b).count();
    if requested < 5 {
        return Err(BaError::InsufficientCorrespondences {
            needed: 5,
            got: requested,
        });
    }
    let mut indices = Vec::new();
    let mut points = Vec::new();
    for (i, c) in corr.points.iter().enumerate() {
        if !inliers[i] {
            continue;
        }
        if let Ok(x) = triangulate(initial_pose, c) {
            if x.z > DEPTH_EPS && initial_pose.transform(&x).z > DEPTH_EPS {
                indices.push(i);
                points.push(x);
            }
        }
    }
    if indices.len() < 5 {
        return Err(BaError::InsufficientCorrespondences {
            needed: 5,
            got: indices.len(),
        });
    }
    let sub = corr.subset(&indices);
    let chart = Chart::anchored_at(&initial_pose.rotation, &initial_pose.translation);
    let start = BaParameterVector {
        pose: chart.params_of(&initial_pose.rotation, &initial_pose.translation),
        points,
    };
    let (mut params, iterations, converged, history) = levenberg_marquardt(&chart, start, &sub, cfg)?;

    // Express the optimum in the plain fusion chart.
    let (r, t) = chart.pose(&params.pose);
    params.pose = Chart::IDENTITY.params_of(&r, &t);
    let (res, jac) = residuals_and_jacobian(&params, &sub)?;
    let final_cost = res.norm_squared();
    if !final_cost.is_finite() {
        return Err(BaError::DivergedOptimization { iteration: iterations });
    }
    Ok(OptimizedEstimate {
        params,
        residuals: res,
        jacobian: jac,
        final_cost,
        initial_cost: history[0],
        converged,
        iterations,
        point_indices: indices,
        cost_history: history,
    })
}

struct NormalEquations {
    pose: SMatrix<f64, 5, 5>,
    coupling: Vec<SMatrix<f64, 5, 3>>,
    points: Vec<Matrix3<f64>>,
    g_pose: SMatrix<f64, 5, 1>,
    g_points: Vec<Vector3<f64>>,
}

fn normal_equations(res: &DVector<f64>, jac: &BlockJacobian) -> NormalEquations {
    let mut ne = NormalEquations {
        pose: SMatrix::zeros(),
        coupling: Vec::with_capacity(jac.n_points()),
        points: Vec::with_capacity(jac.n_points()),
        g_pose: SMatrix::zeros(),
        g_points: Vec::with_capacity(jac.n_points()),
    };
    for (i, b) in jac.blocks.iter().enumerate() {
        let r1 = res.fixed_rows::<2>(4 * i);
        let r2 = res.fixed_rows::<2>(4 * i + 2);
        ne.pose += b.cam2_pose.transpose() * b.cam2_pose;
        ne.coupling.push(b.cam2_pose.transpose() * b.cam2_point);
        ne.points
            .push(b.cam1_point.transpose() * b.cam1_point + b.cam2_point.transpose() * b.cam2_point);
        ne.g_pose += b.cam2_pose.transpose() * r2;
        ne.g_points
            .push(b.cam1_point.transpose() * r1 + b.cam2_point.transpose() * r2);
    }
    ne
}

/// Damped step `(H + λ·diag H) δ = −g`, solved by eliminating the points.
fn damped_step(ne: &NormalEquations, lambda: f64) -> Option<(SMatrix<f64, 5, 1>, Vec<Vector3<f64>>)> {
    let mut s = ne.pose;
    for k in 0..5 {
        s[(k, k)] += lambda * ne.pose[(k, k)].max(1e-12);
    }
    let mut rhs = -ne.g_pose;
    let mut inv_points = Vec::with_capacity(ne.points.len());
    for (i, h) in ne.points.iter().enumerate() {
        let mut hd = *h;
        for k in 0..3 {
            hd[(k, k)] += lambda * h[(k, k)].max(1e-12);
        }
        let inv = hd.try_inverse()?;
        let w = ne.coupling[i] * inv;
        s -= w * ne.coupling[i].transpose();
        rhs += w * ne.g_points[i];
        inv_points.push(inv);
    }
    let dp = s.cholesky().map(|c| c.solve(&rhs)).or_else(|| s.lu().solve(&rhs))?;
    let dx = inv_points
        .iter()
        .enumerate()
        .map(|(i, inv)| inv * (-ne.g_points[i] - ne.coupling[i].transpose() * dp))
        .collect();
    Some((dp, dx))
}

type LmOutcome = (BaParameterVector, usize, bool, Vec<f64>);

fn levenberg_marquardt(
    chart: &Chart,
    mut params: BaParameterVector,
    corr: &CorrespondenceSet,
    cfg: &LmConfig,
) -> Result<LmOutcome, BaError> {
    let mut lambda = cfg.initial_lambda;
    let (mut res, jac) = evaluate(chart, &params, corr, true)?;
    let mut jac = jac.expect("jacobian requested");
    let mut cost = res.norm_squared();
    if !cost.is_finite() {
        return Err(BaError::DivergedOptimization { iteration: 0 });
    }
    let mut history = vec![cost];
    let mut converged = false;
    let mut iter = 0;
    while iter < cfg.max_iterations {
        if cost == 0.0 {
            converged = true;
            break;
        }
        let ne = normal_equations(&res, &jac);
        let gmax = ne
            .g_points
            .iter()
            .flat_map(|g| g.iter().copied())
            .chain(ne.g_pose.iter().copied())
            .fold(0.0f64, |m, v| m.max(v.abs()));
        if gmax < cfg.gradient_tolerance {
            converged = true;
            break;
        }
        iter += 1;
        let mut accepted = false;
        while lambda < 1e16 {
            let Some((dp, dx)) = damped_step(&ne, lambda) else {
                lambda *= 10.0;
                continue;
            };
            let mut trial = params.clone();
            let mut pose = trial.pose.to_array();
            for k in 0..5 {
                pose[k] += dp[k];
            }
            trial.pose = MotionParams::from_array(pose);
            for (x, d) in trial.points.iter_mut().zip(&dx) {
                *x += d;
            }
            match evaluate(chart, &trial, corr, false) {
                Ok((r_trial, _)) => {
                    let c_trial = r_trial.norm_squared();
                    if !c_trial.is_finite() {
                        return Err(BaError::DivergedOptimization { iteration: iter });
                    }
                    if c_trial < cost {
                        let rel = (cost - c_trial) / cost;
                        params = trial;
                        let (r_new, j_new) = evaluate(chart, &params, corr, true)?;
                        res = r_new;
                        jac = j_new.expect("jacobian requested");
                        cost = res.norm_squared();
                        history.push(cost);
                        lambda = (lambda / 10.0).max(1e-12);
                        accepted = true;
                        if rel < cfg.relative_cost_tolerance {
                            converged = true;
                        }
                        break;
                    }
                }
                Err(GeometryError::BehindCamera { .. }) => {}
                Err(e) => return Err(e.into()),
            }
            lambda *= 10.0;
        }
        if !accepted {
            // No step reduces the cost at machine precision.
            converged = true;
            break;
        }
        if converged {
            break;
        }
    }
    Ok((params, iter, converged, history))
}
