use nalgebra::{Matrix3, SMatrix};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::ransac::adaptive_iterations;
use super::{Correspondence, CorrespondenceSet, GeometryError, RansacConfig};

/// Four-point DLT homography mapping image 1 to image 2.
pub fn homography_from_four(pts: &[Correspondence]) -> Option<Matrix3<f64>> {
    if pts.len() != 4 {
        return None;
    }
    let mut a = SMatrix::<f64, 9, 9>::zeros();
    for (i, c) in pts.iter().enumerate() {
        let (x, y) = (c.x1.x, c.x1.y);
        let (u, v) = (c.x2.x, c.x2.y);
        let r0 = [-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u];
        let r1 = [0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v];
        for j in 0..9 {
            a[(2 * i, j)] = r0[j];
            a[(2 * i + 1, j)] = r1[j];
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t?;
    let mut order: Vec<usize> = (0..9).collect();
    order.sort_by(|&p, &q| svd.singular_values[q].total_cmp(&svd.singular_values[p]));
    let s0 = svd.singular_values[order[0]];
    if !(s0 > 0.0) || svd.singular_values[order[7]] <= 1e-10 * s0 {
        // Collinear or repeated points.
        return None;
    }
    let h = v_t.row(order[8]);
    let m = Matrix3::from_row_slice(&h.iter().copied().collect::<Vec<_>>());
    Some(m)
}

fn transfer_error(h: &Matrix3<f64>, c: &Correspondence) -> f64 {
    let p = h * c.h1();
    if p.z.abs() < 1e-12 {
        return f64::INFINITY;
    }
    (c.x2 - p.xy() / p.z).norm()
}

/// Fraction of correspondences explained by the best RANSAC homography.
pub fn fit_homography_ratio(corr: &CorrespondenceSet, cfg: &RansacConfig) -> Result<f64, GeometryError> {
    let n = corr.len();
    if n < 4 {
        return Err(GeometryError::InsufficientCorrespondences { needed: 4, got: n });
    }
    if !corr.is_finite() {
        return Err(GeometryError::DegenerateConfiguration("non-finite correspondences"));
    }
    if n == 4 {
        return Ok(if homography_from_four(&corr.points).is_some() {
            1.0
        } else {
            0.0
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut best = 0usize;
    let mut needed = cfg.max_iterations;
    let mut iter = 0;
    while iter < needed.min(cfg.max_iterations) {
        iter += 1;
        let sample = rand::seq::index::sample(&mut rng, n, 4).into_vec();
        let pts: Vec<_> = sample.iter().map(|&i| corr.points[i]).collect();
        let Some(h) = homography_from_four(&pts) else {
            continue;
        };
        let count = corr
            .points
            .iter()
            .filter(|c| transfer_error(&h, c) < cfg.inlier_threshold)
            .count();
        if count > best {
            best = count;
            needed = adaptive_iterations(count as f64 / n as f64, 4, cfg.max_iterations);
        }
    }
    Ok(best as f64 / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;

    #[test]
    fn exact_plane_gives_full_ratio() {
        // Points on the plane z = 4 seen after a pure translation.
        let t = Vector3::new(0.3, -0.1, 0.2);
        let pts: CorrespondenceSet = (0..30)
            .map(|i| {
                let x = Vector3::new((i % 6) as f64 * 0.3 - 0.8, (i / 6) as f64 * 0.3 - 0.6, 4.0);
                let q = x + t;
                Correspondence {
                    x1: x.xy() / x.z,
                    x2: q.xy() / q.z,
                }
            })
            .collect();
        let r = fit_homography_ratio(&pts, &RansacConfig::default()).unwrap();
        assert_eq!(r, 1.0);
    }

    #[test]
    fn three_points_rejected() {
        let corr = CorrespondenceSet::new(vec![Correspondence::new(0.0, 0.0, 0.0, 0.0); 3]);
        assert!(matches!(
            fit_homography_ratio(&corr, &RansacConfig::default()),
            Err(GeometryError::InsufficientCorrespondences { needed: 4, got: 3 })
        ));
    }
}
