use std::path::Path;

use super::HarnessError;
use crate::neural::{forward_pass, NetworkWeights};
use crate::parallel::{map_slice, Execution};
use crate::simulator::ScenePair;

pub const ATTENTION_HEADER: &str = "#posefuse-attention v1";
const DECILES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionProfileRow {
    pub percentile: f64,
    pub mean_distance: f64,
}

/// Per-decile spatial distances of one scene, summed over its
/// correspondences, and the number of correspondences contributing.
fn scene_profile(scene: &ScenePair, w: &NetworkWeights) -> Result<([f64; DECILES], usize), HarnessError> {
    let pass = forward_pass(&scene.corr, w).map_err(|e| HarnessError::Numeric(format!("{}: {e}", scene.scene_id)))?;
    let a = pass
        .last_attention()
        .ok_or_else(|| HarnessError::Usage("weights have no attention layer".into()))?;
    let pts = &scene.corr.points;
    let n = pts.len();
    let mut sums = [0.0; DECILES];
    if n < 2 {
        return Ok((sums, 0));
    }
    for i in 0..n {
        let mut others: Vec<(f64, f64)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| {
                let d1 = (pts[i].x1 - pts[j].x1).norm();
                let d2 = (pts[i].x2 - pts[j].x2).norm();
                (a[(i, j)], 0.5 * (d1 + d2))
            })
            .collect();
        // Strongest attention first; ties resolved by distance for stability.
        others.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.total_cmp(&y.1)));
        let m = others.len();
        for (k, s) in sums.iter_mut().enumerate() {
            let rank = ((k + 1) * m).div_ceil(DECILES) - 1;
            *s += others[rank].1;
        }
    }
    Ok((sums, n))
}

/// Mean spatial distance, over all correspondences and scenes, of the
/// partner found at each decile of the last-layer attention ranking.
/// Percentile 10 is the most attended tenth, 100 the least attended.
pub fn attention_profile(
    scenes: &[ScenePair],
    w: &NetworkWeights,
    exec: Execution,
) -> Result<Vec<AttentionProfileRow>, HarnessError> {
    if !w.attention_enabled || w.layers() == 0 {
        return Err(HarnessError::Usage("weights have no attention layer".into()));
    }
    let per_scene = map_slice(exec, scenes, |s| scene_profile(s, w));
    let mut sums = [0.0; DECILES];
    let mut count = 0usize;
    for r in per_scene {
        let (s, c) = r?;
        for (a, b) in sums.iter_mut().zip(s) {
            *a += b;
        }
        count += c;
    }
    if count == 0 {
        return Err(HarnessError::Data("no scene has two or more correspondences".into()));
    }
    Ok((0..DECILES)
        .map(|k| AttentionProfileRow {
            percentile: (10 * (k + 1)) as f64,
            mean_distance: sums[k] / count as f64,
        })
        .collect())
}

pub fn attention_profile_csv(rows: &[AttentionProfileRow]) -> String {
    let mut s = format!("{ATTENTION_HEADER}\npercentile,mean_distance\n");
    for r in rows {
        s.push_str(&format!("{:?},{:?}\n", r.percentile, r.mean_distance));
    }
    s
}

pub fn write_attention_profile(path: &Path, rows: &[AttentionProfileRow]) -> Result<(), HarnessError> {
    std::fs::write(path, attention_profile_csv(rows)).map_err(|e| HarnessError::Data(format!("{}: {e}", path.display())))
}
