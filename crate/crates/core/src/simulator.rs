//! Synthetic two-view scenes with controllable difficulty: point count,
//! noise, outliers, planarity, translation direction and rotation size.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::{Matrix3, Rotation3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{epipolar_error, CameraPose, Correspondence, CorrespondenceSet};
use crate::parallel::{map_range, Execution};

/// Half-width of the field of view in normalized image coordinates.
pub const FOV_HALF_WIDTH: f64 = 0.5;
/// Minimum Sampson distance of a generated outlier.
pub const OUTLIER_MIN_ERROR: f64 = 1e-2;
const MIN_DEPTH_CAM2: f64 = 0.1;
const RETRIES_PER_POINT: usize = 2000;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scene config: {0}")]
    InvalidConfig(String),
    #[error("infeasible scene config: {0}")]
    InfeasibleConfig(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse { path: String, line: usize, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub n_points: usize,
    pub noise_sigma: f64,
    pub outlier_fraction: f64,
    pub planar_ratio: f64,
    /// Angle between `t` and the optical axis in degrees; `None` samples
    /// `t` uniformly on the forward hemisphere.
    pub phi_forward: Option<f64>,
    pub rotation_magnitude: f64,
    pub depth_range: [f64; 2],
    pub rng_seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            n_points: 50,
            noise_sigma: 1e-3,
            outlier_fraction: 0.0,
            planar_ratio: 0.0,
            phi_forward: None,
            rotation_magnitude: 10.0,
            depth_range: [2.0, 10.0],
            rng_seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::InvalidConfig(m.to_string()));
        let [near, far] = self.depth_range;
        if !(near > 0.0) {
            return bad("depth_range near must be > 0");
        }
        if !(far > near) || !far.is_finite() {
            return bad("depth_range far must exceed near");
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return bad("noise_sigma must be ≥ 0");
        }
        if !(0.0..=1.0).contains(&self.outlier_fraction) {
            return bad("outlier_fraction must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.planar_ratio) {
            return bad("planar_ratio must lie in [0, 1]");
        }
        if let Some(phi) = self.phi_forward {
            if !(0.0..=90.0).contains(&phi) {
                return bad("phi_forward must lie in [0, 90] degrees");
            }
        }
        if !self.rotation_magnitude.is_finite() || self.rotation_magnitude < 0.0 {
            return bad("rotation_magnitude must be ≥ 0");
        }
        Ok(())
    }

    pub fn outlier_count(&self) -> usize {
        (self.outlier_fraction * self.n_points as f64).round() as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Regime {
    #[serde(rename = "well-conditioned")]
    WellConditioned,
    #[serde(rename = "degenerate")]
    Degenerate,
}

impl Regime {
    pub fn as_str(self) -> &'static str {
        match self {
            Regime::WellConditioned => "well-conditioned",
            Regime::Degenerate => "degenerate",
        }
    }
}

/// Thresholds beyond which a scene is labelled degenerate.
pub const DEGENERATE_PLANAR_RATIO: f64 = 0.8;
pub const DEGENERATE_MIN_POINTS: usize = 15;
pub const DEGENERATE_PHI_DEG: f64 = 80.0;

pub fn classify(planar_ratio: f64, n_points: usize, phi_forward_deg: f64) -> Regime {
    if planar_ratio >= DEGENERATE_PLANAR_RATIO || n_points < DEGENERATE_MIN_POINTS || phi_forward_deg >= DEGENERATE_PHI_DEG {
        Regime::Degenerate
    } else {
        Regime::WellConditioned
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenePair {
    pub scene_id: String,
    pub gt_pose: CameraPose,
    pub corr: CorrespondenceSet,
    pub outlier_mask: Vec<bool>,
    pub config: SceneConfig,
}

impl ScenePair {
    /// Angle between the true translation and the optical axis, degrees.
    pub fn phi_forward_deg(&self) -> f64 {
        match self.config.phi_forward {
            Some(phi) => phi,
            None => self.gt_pose.translation.z.clamp(-1.0, 1.0).acos().to_degrees(),
        }
    }

    pub fn regime(&self) -> Regime {
        classify(self.config.planar_ratio, self.config.n_points, self.phi_forward_deg())
    }
}

fn random_unit(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        );
        let n: f64 = v.norm();
        if n > 1e-9 {
            return v / n;
        }
    }
}

fn sample_translation(rng: &mut ChaCha8Rng, phi_forward: Option<f64>) -> Vector3<f64> {
    match phi_forward {
        Some(phi) => {
            let phi = phi.to_radians();
            let psi = rng.random_range(0.0..std::f64::consts::TAU);
            let z = if phi == std::f64::consts::FRAC_PI_2 { 0.0 } else { phi.cos() };
            Vector3::new(phi.sin() * psi.cos(), phi.sin() * psi.sin(), z)
        }
        None => {
            let mut t = random_unit(rng);
            t.z = t.z.abs();
            t
        }
    }
}

fn in_fov(p: &Vector2<f64>) -> bool {
    p.x.abs() <= FOV_HALF_WIDTH && p.y.abs() <= FOV_HALF_WIDTH
}

struct Plane {
    normal: Vector3<f64>,
    offset: f64,
}

impl Plane {
    fn random(rng: &mut ChaCha8Rng, near: f64, far: f64) -> Self {
        let tilt = rng.random_range(0.0..std::f64::consts::FRAC_PI_4);
        let azim = rng.random_range(0.0..std::f64::consts::TAU);
        let normal = Vector3::new(tilt.sin() * azim.cos(), tilt.sin() * azim.sin(), tilt.cos());
        let span = far - near;
        let depth = rng.random_range(near + 0.25 * span..=far - 0.25 * span);
        Plane {
            offset: normal.z * depth,
            normal,
        }
    }

    fn intersect(&self, u: f64, v: f64) -> Option<Vector3<f64>> {
        let ray = Vector3::new(u, v, 1.0);
        let d = self.normal.dot(&ray);
        (d.abs() > 1e-12).then(|| ray * (self.offset / d))
    }
}

/// Generates one scene; deterministic in `cfg.rng_seed`.
pub fn generate_scene(cfg: &SceneConfig) -> Result<ScenePair, SimError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let axis = random_unit(&mut rng);
    let rotation = *Rotation3::new(axis * cfg.rotation_magnitude.to_radians()).matrix();
    let translation = sample_translation(&mut rng, cfg.phi_forward);
    let gt_pose = CameraPose::new(rotation, translation).map_err(|e| SimError::InfeasibleConfig(e.to_string()))?;
    let [near, far] = cfg.depth_range;
    let plane = Plane::random(&mut rng, near, far);
    let n = cfg.n_points;
    let n_planar = (cfg.planar_ratio * n as f64).round() as usize;

    let mut clean = Vec::with_capacity(n);
    let budget = RETRIES_PER_POINT * (n + 1);
    let mut attempts = 0;
    while clean.len() < n {
        attempts += 1;
        if attempts > budget {
            return Err(SimError::InfeasibleConfig(format!(
                "only {} of {} points visible in both views after {budget} draws",
                clean.len(),
                n
            )));
        }
        let u = rng.random_range(-FOV_HALF_WIDTH..=FOV_HALF_WIDTH);
        let v = rng.random_range(-FOV_HALF_WIDTH..=FOV_HALF_WIDTH);
        let x = if clean.len() < n_planar {
            match plane.intersect(u, v) {
                Some(x) if x.z >= near && x.z <= far => x,
                _ => continue,
            }
        } else {
            Vector3::new(u, v, 1.0) * rng.random_range(near..=far)
        };
        let q = gt_pose.transform(&x);
        if q.z <= MIN_DEPTH_CAM2 {
            continue;
        }
        let x2 = q.xy() / q.z;
        if !in_fov(&x2) {
            continue;
        }
        clean.push(Correspondence {
            x1: Vector2::new(u, v),
            x2,
        });
    }

    if cfg.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, cfg.noise_sigma).expect("validated sigma");
        for c in clean.iter_mut() {
            c.x1 += Vector2::new(normal.sample(&mut rng), normal.sample(&mut rng));
            c.x2 += Vector2::new(normal.sample(&mut rng), normal.sample(&mut rng));
        }
    }

    let mut outlier_mask = vec![false; n];
    let k = cfg.outlier_count().min(n);
    if k > 0 {
        let e: Matrix3<f64> = gt_pose.essential();
        let chosen = rand::seq::index::sample(&mut rng, n, k).into_vec();
        for i in chosen {
            let mut tries = 0;
            loop {
                tries += 1;
                if tries > RETRIES_PER_POINT {
                    return Err(SimError::InfeasibleConfig(
                        "could not sample an epipolar-inconsistent outlier".into(),
                    ));
                }
                let cand = Correspondence {
                    x1: Vector2::new(
                        rng.random_range(-FOV_HALF_WIDTH..=FOV_HALF_WIDTH),
                        rng.random_range(-FOV_HALF_WIDTH..=FOV_HALF_WIDTH),
                    ),
                    x2: Vector2::new(
                        rng.random_range(-FOV_HALF_WIDTH..=FOV_HALF_WIDTH),
                        rng.random_range(-FOV_HALF_WIDTH..=FOV_HALF_WIDTH),
                    ),
                };
                if epipolar_error(&e, &cand) > OUTLIER_MIN_ERROR {
                    clean[i] = cand;
                    outlier_mask[i] = true;
                    break;
                }
            }
        }
    }

    Ok(ScenePair {
        scene_id: scene_id(cfg.rng_seed),
        gt_pose,
        corr: CorrespondenceSet::new(clean),
        outlier_mask,
        config: cfg.clone(),
    })
}

pub fn scene_id(seed: u64) -> String {
    format!("{seed:016x}")
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Per-scene seed, independent of generation order and thread count.
pub fn scene_seed(master: u64, index: u64) -> u64 {
    splitmix64(master ^ splitmix64(index))
}

/// A scalar or an inclusive `[lo, hi]` range sampled uniformly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ValueRange {
    Fixed(f64),
    Span([f64; 2]),
}

impl ValueRange {
    fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        match *self {
            ValueRange::Fixed(v) => v,
            ValueRange::Span([lo, hi]) if hi > lo => rng.random_range(lo..=hi),
            ValueRange::Span([lo, _]) => lo,
        }
    }

    fn sample_count(&self, rng: &mut ChaCha8Rng) -> usize {
        match *self {
            ValueRange::Fixed(v) => v.round().max(0.0) as usize,
            ValueRange::Span([lo, hi]) => {
                let (lo, hi) = (lo.round().max(0.0) as usize, hi.round().max(0.0) as usize);
                if hi > lo {
                    rng.random_range(lo..=hi)
                } else {
                    lo
                }
            }
        }
    }

    fn bounds(&self) -> (f64, f64) {
        match *self {
            ValueRange::Fixed(v) => (v, v),
            ValueRange::Span([lo, hi]) => (lo, hi),
        }
    }
}

/// Dataset template: every difficulty axis is sampled independently per
/// scene from its range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetTemplate {
    pub n_points: ValueRange,
    pub noise_sigma: ValueRange,
    pub outlier_fraction: ValueRange,
    pub planar_ratio: ValueRange,
    pub phi_forward: Option<ValueRange>,
    pub rotation_magnitude: ValueRange,
    pub depth_range: [f64; 2],
}

impl Default for DatasetTemplate {
    fn default() -> Self {
        Self {
            n_points: ValueRange::Span([8.0, 100.0]),
            noise_sigma: ValueRange::Span([5e-4, 3e-3]),
            outlier_fraction: ValueRange::Span([0.0, 0.3]),
            planar_ratio: ValueRange::Span([0.0, 1.0]),
            phi_forward: None,
            rotation_magnitude: ValueRange::Span([0.0, 20.0]),
            depth_range: [2.0, 10.0],
        }
    }
}

impl From<&SceneConfig> for DatasetTemplate {
    fn from(c: &SceneConfig) -> Self {
        Self {
            n_points: ValueRange::Fixed(c.n_points as f64),
            noise_sigma: ValueRange::Fixed(c.noise_sigma),
            outlier_fraction: ValueRange::Fixed(c.outlier_fraction),
            planar_ratio: ValueRange::Fixed(c.planar_ratio),
            phi_forward: c.phi_forward.map(ValueRange::Fixed),
            rotation_magnitude: ValueRange::Fixed(c.rotation_magnitude),
            depth_range: c.depth_range,
        }
    }
}

impl DatasetTemplate {
    pub fn validate(&self) -> Result<(), SimError> {
        let check = |name: &str, r: &ValueRange, lo: f64, hi: f64| {
            let (a, b) = r.bounds();
            if !(a <= b && a >= lo && b <= hi) {
                return Err(SimError::InvalidConfig(format!(
                    "{name} range [{a}, {b}] outside [{lo}, {hi}]"
                )));
            }
            Ok(())
        };
        check("n_points", &self.n_points, 0.0, 1e7)?;
        check("noise_sigma", &self.noise_sigma, 0.0, f64::MAX)?;
        check("outlier_fraction", &self.outlier_fraction, 0.0, 1.0)?;
        check("planar_ratio", &self.planar_ratio, 0.0, 1.0)?;
        if let Some(phi) = &self.phi_forward {
            check("phi_forward", phi, 0.0, 90.0)?;
        }
        check("rotation_magnitude", &self.rotation_magnitude, 0.0, f64::MAX)?;
        SceneConfig {
            depth_range: self.depth_range,
            ..Default::default()
        }
        .validate()
    }

    /// Scene config for `index` under `master` seed.
    pub fn sample(&self, master: u64, index: u64) -> SceneConfig {
        let seed = scene_seed(master, index);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5bd1_e995_5bd1_e995);
        SceneConfig {
            n_points: self.n_points.sample_count(&mut rng),
            noise_sigma: self.noise_sigma.sample(&mut rng),
            outlier_fraction: self.outlier_fraction.sample(&mut rng),
            planar_ratio: self.planar_ratio.sample(&mut rng),
            phi_forward: self.phi_forward.map(|r| r.sample(&mut rng)),
            rotation_magnitude: self.rotation_magnitude.sample(&mut rng),
            depth_range: self.depth_range,
            rng_seed: seed,
        }
    }
}

pub fn generate_dataset(
    template: &DatasetTemplate,
    count: usize,
    master_seed: u64,
    exec: Execution,
) -> Result<Vec<ScenePair>, SimError> {
    template.validate()?;
    map_range(exec, count, |i| generate_scene(&template.sample(master_seed, i as u64)))
        .into_iter()
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneMeta {
    pub n_points: usize,
    pub noise_sigma: f64,
    pub outlier_fraction: f64,
    pub planar_ratio: f64,
    pub phi_forward_deg: f64,
    /// Whether `phi_forward_deg` was prescribed rather than sampled.
    pub phi_forward_fixed: bool,
    pub rotation_magnitude_deg: f64,
    pub depth_range: [f64; 2],
    pub rng_seed: u64,
    pub regime: Regime,
}

/// One line of a dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub scene_id: String,
    pub gt_rotation: [f64; 9],
    pub gt_translation: [f64; 3],
    pub correspondences: Vec<[f64; 4]>,
    pub outlier_mask: Vec<bool>,
    pub meta: SceneMeta,
}

impl From<&ScenePair> for SceneRecord {
    fn from(s: &ScenePair) -> Self {
        let r = &s.gt_pose.rotation;
        Self {
            scene_id: s.scene_id.clone(),
            gt_rotation: std::array::from_fn(|k| r[(k / 3, k % 3)]),
            gt_translation: s.gt_pose.translation.into(),
            correspondences: s.corr.points.iter().map(|c| c.as_array()).collect(),
            outlier_mask: s.outlier_mask.clone(),
            meta: SceneMeta {
                n_points: s.config.n_points,
                noise_sigma: s.config.noise_sigma,
                outlier_fraction: s.config.outlier_fraction,
                planar_ratio: s.config.planar_ratio,
                phi_forward_deg: s.phi_forward_deg(),
                phi_forward_fixed: s.config.phi_forward.is_some(),
                rotation_magnitude_deg: s.config.rotation_magnitude,
                depth_range: s.config.depth_range,
                rng_seed: s.config.rng_seed,
                regime: s.regime(),
            },
        }
    }
}

impl SceneRecord {
    pub fn into_scene(self) -> Result<ScenePair, String> {
        let r = Matrix3::from_row_slice(&self.gt_rotation);
        let t = Vector3::from(self.gt_translation);
        // Validates without renormalizing the stored values.
        CameraPose::new(r, t).map_err(|e| format!("gt pose: {e}"))?;
        if (t.norm() - 1.0).abs() > 1e-9 {
            return Err("gt translation is not unit length".into());
        }
        if self.outlier_mask.len() != self.correspondences.len() {
            return Err("outlier_mask length differs from correspondences".into());
        }
        Ok(ScenePair {
            scene_id: self.scene_id,
            gt_pose: CameraPose::from_parts_unchecked(r, t),
            corr: self.correspondences.into_iter().map(Correspondence::from).collect(),
            outlier_mask: self.outlier_mask,
            config: SceneConfig {
                n_points: self.meta.n_points,
                noise_sigma: self.meta.noise_sigma,
                outlier_fraction: self.meta.outlier_fraction,
                planar_ratio: self.meta.planar_ratio,
                phi_forward: self.meta.phi_forward_fixed.then_some(self.meta.phi_forward_deg),
                rotation_magnitude: self.meta.rotation_magnitude_deg,
                depth_range: self.meta.depth_range,
                rng_seed: self.meta.rng_seed,
            },
        })
    }
}

pub fn write_dataset(path: &Path, scenes: &[ScenePair]) -> Result<(), SimError> {
    let io = |source| SimError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    for s in scenes {
        let line = serde_json::to_string(&SceneRecord::from(s)).expect("records serialize");
        writeln!(w, "{line}").map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_dataset(path: &Path) -> Result<Vec<ScenePair>, SimError> {
    let p = path.display().to_string();
    let f = File::open(path).map_err(|source| SimError::Io { path: p.clone(), source })?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|source| SimError::Io { path: p.clone(), source })?;
        if line.trim().is_empty() {
            continue;
        }
        let parse = |message: String| SimError::Parse {
            path: p.clone(),
            line: i + 1,
            message,
        };
        let rec: SceneRecord = serde_json::from_str(&line).map_err(|e| parse(e.to_string()))?;
        out.push(rec.into_scene().map_err(parse)?);
    }
    Ok(out)
}
