use nalgebra::{Matrix3, Vector3};

use super::{triangulate_linear, CameraPose, CorrespondenceSet, EssentialMatrix, GeometryError, DEPTH_EPS};

/// The four `(R, t)` factorizations of an essential matrix.
pub fn pose_candidates(e: &EssentialMatrix) -> [CameraPose; 4] {
    let svd = e.matrix().svd(true, true);
    let mut u = svd.u.expect("svd u");
    let mut v_t = svd.v_t.expect("svd v_t");
    // Sort so the null direction is the last column of U and row of Vᵀ.
    let (k, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .unwrap();
    if k != 2 {
        u.swap_columns(k, 2);
        v_t.swap_rows(k, 2);
    }
    if u.determinant() < 0.0 {
        u.column_mut(2).neg_mut();
    }
    if v_t.determinant() < 0.0 {
        v_t.row_mut(2).neg_mut();
    }
    let w = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
    let r1 = u * w * v_t;
    let r2 = u * w.transpose() * v_t;
    let t: Vector3<f64> = u.column(2).normalize();
    [
        CameraPose::from_parts_unchecked(r1, t),
        CameraPose::from_parts_unchecked(r1, -t),
        CameraPose::from_parts_unchecked(r2, t),
        CameraPose::from_parts_unchecked(r2, -t),
    ]
}

/// Picks the factorization that places the most support points in front of
/// both cameras. Ties go to the lower total reprojection error.
pub fn decompose_essential(e: &EssentialMatrix, support: &CorrespondenceSet) -> Result<CameraPose, GeometryError> {
    if support.is_empty() {
        return Err(GeometryError::InsufficientCorrespondences { needed: 1, got: 0 });
    }
    let mut best: Option<(usize, f64, CameraPose)> = None;
    for cand in pose_candidates(e) {
        let mut count = 0usize;
        let mut err = 0.0;
        for pair in &support.points {
            let Ok(x) = triangulate_linear(&cand, pair) else {
                continue;
            };
            let p2 = cand.transform(&x);
            if x.z > DEPTH_EPS && p2.z > DEPTH_EPS {
                count += 1;
                err += (pair.x1 - x.xy() / x.z).norm_squared() + (pair.x2 - p2.xy() / p2.z).norm_squared();
            }
        }
        let better = match &best {
            None => true,
            Some((c, e, _)) => count > *c || (count == *c && err < *e),
        };
        if better {
            best = Some((count, err, cand));
        }
    }
    let (count, _, pose) = best.unwrap();
    if 2 * count <= support.len() {
        return Err(GeometryError::CheiralityFailure {
            support: support.len(),
            best: count,
        });
    }
    Ok(pose)
}
