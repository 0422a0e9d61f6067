use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    decompose_essential, epipolar_error, essential_from_five, CameraPose, CorrespondenceSet, EssentialMatrix, GeometryError,
};

/// Probability that at least one all-inlier sample was drawn before early exit.
pub(crate) const RANSAC_CONFIDENCE: f64 = 0.999;
/// Minimal samples drawn from the best consensus set after the main loop.
const LOCAL_ITERATIONS: usize = 30;
const LOCAL_ROUNDS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RansacConfig {
    pub max_iterations: usize,
    /// Sampson distance bound, normalized-coordinate units.
    pub inlier_threshold: f64,
    pub min_inliers: usize,
    pub rng_seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            max_iterations: 1000,
            inlier_threshold: 1e-3,
            min_inliers: 8,
            rng_seed: 0,
        }
    }
}

impl RansacConfig {
    pub fn validate(&self) -> Result<(), GeometryError> {
        if self.max_iterations < 1 {
            return Err(GeometryError::InvalidConfig("max_iterations must be ≥ 1".into()));
        }
        if !(self.inlier_threshold > 0.0) {
            return Err(GeometryError::InvalidConfig("inlier_threshold must be > 0".into()));
        }
        if self.min_inliers < 5 {
            return Err(GeometryError::InvalidConfig("min_inliers must be ≥ 5".into()));
        }
        Ok(())
    }
}

/// Iterations needed to reach `RANSAC_CONFIDENCE` at the given inlier ratio.
pub(crate) fn adaptive_iterations(inlier_ratio: f64, sample_size: i32, cap: usize) -> usize {
    let p_good = inlier_ratio.powi(sample_size);
    if p_good >= 1.0 {
        return 1;
    }
    if p_good <= 0.0 {
        return cap;
    }
    let n = (1.0 - RANSAC_CONFIDENCE).ln() / (1.0 - p_good).ln();
    if n.is_finite() {
        (n.ceil() as usize).clamp(1, cap)
    } else {
        cap
    }
}

/// Scores a model: inlier count, then truncated squared-error sum for ties.
fn score(e: &EssentialMatrix, corr: &CorrespondenceSet, threshold: f64) -> (usize, f64) {
    let mut count = 0;
    let mut loss = 0.0;
    for c in &corr.points {
        let err = epipolar_error(e.matrix(), c);
        if err < threshold {
            count += 1;
            loss += err * err;
        } else {
            loss += threshold * threshold;
        }
    }
    (count, loss)
}

fn improves(best: &Option<(usize, f64, EssentialMatrix)>, count: usize, loss: f64) -> bool {
    match best {
        None => true,
        Some((c, l, _)) => count > *c || (count == *c && loss < *l),
    }
}

/// Five-point RANSAC with Sampson-distance consensus and adaptive
/// termination. Deterministic for a given `cfg.rng_seed`.
pub fn ransac_relative_pose(corr: &CorrespondenceSet, cfg: &RansacConfig) -> Result<(CameraPose, Vec<bool>), GeometryError> {
    cfg.validate()?;
    let n = corr.len();
    if n < 5 {
        return Err(GeometryError::InsufficientCorrespondences { needed: 5, got: n });
    }
    if !corr.is_finite() {
        return Err(GeometryError::DegenerateConfiguration("non-finite correspondences"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut best: Option<(usize, f64, EssentialMatrix)> = None;
    let mut needed = cfg.max_iterations;
    let mut iter = 0;
    while iter < needed.min(cfg.max_iterations) {
        iter += 1;
        let sample = rand::seq::index::sample(&mut rng, n, 5).into_vec();
        let minimal = corr.subset(&sample);
        let Ok(models) = essential_from_five(&minimal) else {
            continue;
        };
        for e in models {
            let (count, loss) = score(&e, corr, cfg.inlier_threshold);
            if improves(&best, count, loss) {
                best = Some((count, loss, e));
                needed = adaptive_iterations(count as f64 / n as f64, 5, cfg.max_iterations);
            }
        }
    }
    // Local optimization: minimal samples drawn from the consensus set
    // alone give models far more accurate than a random all-inlier draw.
    // Repeated while the consensus set keeps improving.
    for _ in 0..LOCAL_ROUNDS {
        let Some((before_count, before_loss, e)) = &best else { break };
        let before = (*before_count, *before_loss);
        let support: Vec<usize> = (0..n)
            .filter(|&i| epipolar_error(e.matrix(), &corr.points[i]) < cfg.inlier_threshold)
            .collect();
        if support.len() <= 5 {
            break;
        }
        for _ in 0..LOCAL_ITERATIONS {
            let pick = rand::seq::index::sample(&mut rng, support.len(), 5);
            let minimal = corr.subset(&pick.iter().map(|k| support[k]).collect::<Vec<_>>());
            let Ok(models) = essential_from_five(&minimal) else {
                continue;
            };
            for e in models {
                let (count, loss) = score(&e, corr, cfg.inlier_threshold);
                if improves(&best, count, loss) {
                    best = Some((count, loss, e));
                }
            }
        }
        if best.as_ref().is_some_and(|(c, l, _)| (*c, *l) == before) {
            break;
        }
    }
    let Some((count, _, e)) = best else {
        return Err(GeometryError::NoConsensus {
            inliers: 0,
            required: cfg.min_inliers,
        });
    };
    if count < cfg.min_inliers {
        return Err(GeometryError::NoConsensus {
            inliers: count,
            required: cfg.min_inliers,
        });
    }
    let mask: Vec<bool> = corr
        .points
        .iter()
        .map(|c| epipolar_error(e.matrix(), c) < cfg.inlier_threshold)
        .collect();
    let support: Vec<usize> = (0..n).filter(|&i| mask[i]).collect();
    let pose = decompose_essential(&e, &corr.subset(&support))?;
    Ok((pose, mask))
}
