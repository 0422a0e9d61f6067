//! End-to-end pipelines: geometric solve, learned inference, fusion,
//! per-scene metrics and the results/curve CSV files.

mod analyze;
mod attention;
pub mod stats;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bundle::{refine_with, LmConfig};
use crate::fusion::fuse_pose;
use crate::geometry::{
    direction_angle, fit_homography_ratio, ransac_relative_pose, rotation_angle, CameraPose, CorrespondenceSet, RansacConfig,
};
use crate::motion::MotionParams;
use crate::neural::{forward, NetworkWeights, TrainingScene};
use crate::parallel::{map_slice, Execution};
use crate::simulator::ScenePair;
use crate::uncertainty::{a_posteriori_sigma, pose_uncertainty_with, GaussianEstimate};

pub use analyze::{analyze, analyze_file, curves_to_csv, SortKey, CURVES_HEADER};
pub use attention::{attention_profile, attention_profile_csv, write_attention_profile, AttentionProfileRow, ATTENTION_HEADER};

pub const RESULTS_HEADER: &str = "#posefuse-results v1";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("data: {0}")]
    Data(String),
    #[error("numeric: {0}")]
    Numeric(String),
}

impl HarnessError {
    /// Process exit status for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Usage(_) => 2,
            HarnessError::Data(_) => 3,
            HarnessError::Numeric(_) => 4,
        }
    }
}

/// Rotation error and translation direction error, in degrees. Both use
/// atan2 forms, equal to the arccos ones but exact near zero.
pub fn evaluate_pose(est: &CameraPose, gt: &CameraPose) -> (f64, f64) {
    let rot = rotation_angle(&est.rotation, &gt.rotation).to_degrees();
    let trans = direction_angle(&est.translation, &gt.translation).to_degrees();
    (rot, trans)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Geo,
    Dnn,
    Fused,
    Median,
    NoUnc,
}

impl Mode {
    pub const ALL: [Mode; 5] = [Mode::Geo, Mode::Dnn, Mode::Fused, Mode::Median, Mode::NoUnc];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Geo => "geo",
            Mode::Dnn => "dnn",
            Mode::Fused => "fused",
            Mode::Median => "median",
            Mode::NoUnc => "no_unc",
        }
    }

    pub fn needs_weights(self) -> bool {
        self != Mode::Geo
    }

    fn fuses(self) -> bool {
        matches!(self, Mode::Fused | Mode::Median)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = HarnessError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| HarnessError::Usage(format!("unknown mode `{s}` (expected geo, dnn, fused, median or no_unc)")))
    }
}

/// Measurement noise used to scale the geometric information matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseModel {
    /// Fixed residual standard deviation.
    Fixed(f64),
    /// Residual standard deviation estimated from the final cost.
    APosteriori,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeometricConfig {
    pub ransac: RansacConfig,
    pub lm: LmConfig,
    pub noise: NoiseModel,
}

/// Pipeline consensus threshold: about twice the largest noise level the
/// dataset template draws, well below the outlier floor.
pub const PIPELINE_INLIER_THRESHOLD: f64 = 5e-3;

impl Default for GeometricConfig {
    fn default() -> Self {
        Self {
            ransac: RansacConfig {
                inlier_threshold: PIPELINE_INLIER_THRESHOLD,
                ..RansacConfig::default()
            },
            lm: LmConfig::default(),
            noise: NoiseModel::Fixed(1.0),
        }
    }
}

/// Output of the geometric branch for one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct GeometricResult {
    pub estimate: GaussianEstimate,
    /// Refined pose, or the RANSAC pose when refinement failed.
    pub pose: Option<CameraPose>,
    pub inlier_count: usize,
    pub h_ratio: Option<f64>,
    pub error: Option<String>,
}

/// Five-point RANSAC, bundle adjustment and Schur-complement uncertainty.
/// Failures are reported in the result, never raised.
pub fn solve_geometric(corr: &CorrespondenceSet, cfg: &GeometricConfig) -> GeometricResult {
    let h_ratio = fit_homography_ratio(corr, &cfg.ransac).ok();
    let fail = |pose, inliers, msg: String| GeometricResult {
        estimate: GaussianEstimate::invalid(),
        pose,
        inlier_count: inliers,
        h_ratio,
        error: Some(msg),
    };
    if !corr.is_finite() {
        return fail(None, 0, "non-finite correspondences".into());
    }
    let (pose, mask) = match ransac_relative_pose(corr, &cfg.ransac) {
        Ok(r) => r,
        Err(e) => return fail(None, 0, format!("ransac: {e}")),
    };
    let inliers = mask.iter().filter(|&&m| m).count();
    let est = match refine_with(&pose, corr, &mask, &cfg.lm) {
        Ok(e) => e,
        Err(e) => return fail(Some(pose), inliers, format!("bundle adjustment: {e}")),
    };
    let sigma = match cfg.noise {
        NoiseModel::Fixed(s) => s,
        NoiseModel::APosteriori => match a_posteriori_sigma(&est) {
            Some(s) => s,
            None => return fail(Some(est.pose()), inliers, "uncertainty: residual dof exhausted".into()),
        },
    };
    let refined = est.params.pose.to_pose();
    match pose_uncertainty_with(&est, sigma) {
        Ok(g) if g.valid => GeometricResult {
            estimate: g,
            pose: Some(refined),
            inlier_count: inliers,
            h_ratio,
            error: None,
        },
        Ok(_) => fail(Some(refined), inliers, "uncertainty: singular information matrix".into()),
        Err(e) => fail(Some(refined), inliers, format!("uncertainty: {e}")),
    }
}

/// Training examples with their geometric estimates precomputed.
pub fn training_scenes(scenes: &[ScenePair], cfg: &GeometricConfig, exec: Execution) -> Vec<TrainingScene> {
    map_slice(exec, scenes, |s| {
        let geo = solve_geometric(&s.corr, cfg);
        TrainingScene::new(s.corr.clone(), &s.gt_pose, geo.estimate)
    })
}

/// One row of a results file.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneResult {
    pub scene_id: String,
    pub mode: Mode,
    pub regime: String,
    pub n_points: usize,
    pub noise_sigma: f64,
    pub outlier_fraction: f64,
    pub planar_ratio: f64,
    pub phi_forward: f64,
    pub rotation_magnitude: f64,
    pub geo_valid: bool,
    pub inlier_count: usize,
    pub h_ratio: Option<f64>,
    pub geo: Option<GaussianEstimate>,
    pub dnn: Option<GaussianEstimate>,
    pub fused: Option<GaussianEstimate>,
    pub geo_err: Option<(f64, f64)>,
    pub dnn_err: Option<(f64, f64)>,
    pub fused_err: Option<(f64, f64)>,
    /// Errors of the pose this mode outputs.
    pub err: Option<(f64, f64)>,
    pub error: String,
}

impl SceneResult {
    pub fn total_trans_ivar(&self) -> f64 {
        self.geo.filter(|g| g.valid).map_or(0.0, |g| g.total_translation_ivar())
    }

    pub fn total_rot_ivar(&self) -> f64 {
        self.geo.filter(|g| g.valid).map_or(0.0, |g| g.total_rotation_ivar())
    }
}

fn pose_of(means: &[f64; 5]) -> CameraPose {
    MotionParams::from_array(*means).to_pose()
}

/// Runs one scene through the requested mode.
pub fn run_scene(scene: &ScenePair, weights: Option<&NetworkWeights>, mode: Mode, cfg: &GeometricConfig) -> SceneResult {
    let geo = solve_geometric(&scene.corr, cfg);
    let mut errors: Vec<String> = geo.error.iter().cloned().collect();
    let geo_err = if geo.estimate.valid {
        Some(evaluate_pose(&pose_of(&geo.estimate.means), &scene.gt_pose))
    } else {
        None
    };

    let mut dnn = None;
    if mode.needs_weights() {
        match weights.map(|w| forward(&scene.corr, w)) {
            Some(Ok(e)) => dnn = Some(e),
            Some(Err(e)) => errors.push(format!("network: {e}")),
            None => errors.push("network: no weights".into()),
        }
    }
    let dnn_err = dnn.map(|d| evaluate_pose(&pose_of(&d.means), &scene.gt_pose));

    let mut fused = None;
    if mode.fuses() {
        if let Some(mut d) = dnn {
            if mode == Mode::Median {
                match weights.and_then(|w| w.median_inverse_variances) {
                    Some(m) => d.inverse_variances = m,
                    None => errors.push("median mode: weights carry no median inverse variances".into()),
                }
            }
            fused = Some(fuse_pose(&geo.estimate, &d).1);
        }
    }
    let fused_err = fused.map(|f| evaluate_pose(&pose_of(&f.means), &scene.gt_pose));

    let err = match mode {
        Mode::Geo => geo_err,
        Mode::Dnn | Mode::NoUnc => dnn_err,
        Mode::Fused | Mode::Median => fused_err,
    };
    SceneResult {
        scene_id: scene.scene_id.clone(),
        mode,
        regime: scene.regime().as_str().to_string(),
        n_points: scene.config.n_points,
        noise_sigma: scene.config.noise_sigma,
        outlier_fraction: scene.config.outlier_fraction,
        planar_ratio: scene.config.planar_ratio,
        phi_forward: scene.phi_forward_deg(),
        rotation_magnitude: scene.config.rotation_magnitude,
        geo_valid: geo.estimate.valid,
        inlier_count: geo.inlier_count,
        h_ratio: geo.h_ratio,
        geo: Some(geo.estimate),
        dnn,
        fused,
        geo_err,
        dnn_err,
        fused_err,
        err,
        error: errors.join("; "),
    }
}

/// Runs every scene; rows are ordered by `scene_id`.
pub fn run_pipeline(
    scenes: &[ScenePair],
    weights: Option<&NetworkWeights>,
    mode: Mode,
    cfg: &GeometricConfig,
    exec: Execution,
) -> Result<Vec<SceneResult>, HarnessError> {
    if mode.needs_weights() && weights.is_none() {
        return Err(HarnessError::Usage(format!("mode {mode} requires a weights file")));
    }
    let mut rows = map_slice(exec, scenes, |s| run_scene(s, weights, mode, cfg));
    rows.sort_by(|a, b| a.scene_id.cmp(&b.scene_id));
    Ok(rows)
}

const PARAMS: [&str; 5] = ["yaw", "pitch", "roll", "alpha", "beta"];

pub fn results_columns() -> Vec<String> {
    let mut c: Vec<String> = [
        "scene_id",
        "mode",
        "regime",
        "n_points",
        "noise_sigma",
        "outlier_fraction",
        "planar_ratio",
        "phi_forward",
        "rotation_magnitude",
        "geo_valid",
        "inlier_count",
        "h_ratio",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    for branch in ["geo", "dnn", "fused"] {
        for p in PARAMS {
            c.push(format!("{branch}_{p}"));
        }
        for p in PARAMS {
            c.push(format!("{branch}_ivar_{p}"));
        }
    }
    for branch in ["geo", "dnn", "fused"] {
        c.push(format!("{branch}_rot_err"));
        c.push(format!("{branch}_trans_err"));
    }
    for s in ["rot_err", "trans_err", "total_trans_ivar", "total_rot_ivar", "error"] {
        c.push(s.to_string());
    }
    c
}

fn num(v: f64) -> String {
    format!("{v:?}")
}

fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

impl SceneResult {
    fn record(&self) -> Vec<String> {
        let mut r = vec![
            self.scene_id.clone(),
            self.mode.to_string(),
            self.regime.clone(),
            self.n_points.to_string(),
            num(self.noise_sigma),
            num(self.outlier_fraction),
            num(self.planar_ratio),
            num(self.phi_forward),
            num(self.rotation_magnitude),
            (self.geo_valid as u8).to_string(),
            self.inlier_count.to_string(),
            opt(self.h_ratio),
        ];
        for (branch, only_valid) in [(&self.geo, true), (&self.dnn, false), (&self.fused, false)] {
            let e = branch.filter(|g| g.valid || !only_valid);
            for k in 0..5 {
                r.push(opt(e.map(|g| g.means[k])));
            }
            for k in 0..5 {
                r.push(opt(e.map(|g| g.inverse_variances[k])));
            }
        }
        for e in [self.geo_err, self.dnn_err, self.fused_err] {
            r.push(opt(e.map(|x| x.0)));
            r.push(opt(e.map(|x| x.1)));
        }
        r.push(opt(self.err.map(|x| x.0)));
        r.push(opt(self.err.map(|x| x.1)));
        r.push(num(self.total_trans_ivar()));
        r.push(num(self.total_rot_ivar()));
        r.push(self.error.clone());
        r
    }
}

pub fn results_to_csv(rows: &[SceneResult]) -> String {
    let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
    w.write_record(results_columns()).expect("in-memory csv");
    for row in rows {
        w.write_record(row.record()).expect("in-memory csv");
    }
    let body = String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf8 csv");
    format!("{RESULTS_HEADER}\n{body}")
}

pub fn write_results(path: &Path, rows: &[SceneResult]) -> Result<(), HarnessError> {
    std::fs::write(path, results_to_csv(rows)).map_err(|e| HarnessError::Data(format!("{}: {e}", path.display())))
}

/// A parsed CSV table: header plus string cells.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn column(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    /// Numeric values of a column, `None` for empty or malformed cells.
    pub fn numbers(&self, name: &str) -> Option<Vec<Option<f64>>> {
        let k = self.column(name)?;
        Some(self.rows.iter().map(|r| r[k].parse::<f64>().ok()).collect())
    }
}

pub fn parse_table(text: &str) -> Result<Table, HarnessError> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .has_headers(true)
        .from_reader(text.as_bytes());
    let columns: Vec<String> = rdr
        .headers()
        .map_err(|e| HarnessError::Data(e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| HarnessError::Data(e.to_string()))?;
        rows.push(rec.iter().map(str::to_string).collect());
    }
    Ok(Table { columns, rows })
}

pub fn read_table(path: &Path) -> Result<Table, HarnessError> {
    let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Data(format!("{}: {e}", path.display())))?;
    parse_table(&text)
}
