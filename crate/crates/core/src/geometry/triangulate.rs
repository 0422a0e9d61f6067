use nalgebra::{Matrix2x3, Matrix3, Matrix4, Vector3, Vector4};

use super::{direction_angle, CameraPose, Correspondence, GeometryError, DEPTH_EPS};

/// Rays closer than this angle (radians) are treated as parallel.
pub const PARALLEL_RAY_EPS: f64 = 1e-6;

fn check_rays(pose: &CameraPose, pair: &Correspondence) -> Result<(), GeometryError> {
    let r1 = pair.h1();
    let r2 = pose.rotation.transpose() * pair.h2();
    let angle = direction_angle(&r1, &r2);
    if angle <= PARALLEL_RAY_EPS || angle >= std::f64::consts::PI - PARALLEL_RAY_EPS {
        return Err(GeometryError::ParallelRays { angle });
    }
    Ok(())
}

/// Linear (DLT) triangulation in the camera-1 frame, without refinement.
/// The returned point may lie behind either camera.
pub fn triangulate_linear(pose: &CameraPose, pair: &Correspondence) -> Result<Vector3<f64>, GeometryError> {
    check_rays(pose, pair)?;
    let (r, t) = (&pose.rotation, &pose.translation);
    let mut a = Matrix4::<f64>::zeros();
    // Camera 1: [I | 0]
    a.set_row(0, &Vector4::new(-1.0, 0.0, pair.x1.x, 0.0).transpose());
    a.set_row(1, &Vector4::new(0.0, -1.0, pair.x1.y, 0.0).transpose());
    for (row, (coord, k)) in [(pair.x2.x, 0usize), (pair.x2.y, 1)].into_iter().enumerate() {
        let mut v = Vector4::zeros();
        for j in 0..3 {
            v[j] = coord * r[(2, j)] - r[(k, j)];
        }
        v[3] = coord * t.z - t[k];
        a.set_row(2 + row, &v.transpose());
    }
    let svd = a.svd(false, true);
    let v_t = svd
        .v_t
        .ok_or(GeometryError::DegenerateConfiguration("triangulation SVD failed"))?;
    let (k, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .unwrap();
    let h = v_t.row(k);
    if h[3].abs() < 1e-14 * h.norm() {
        return Err(GeometryError::ParallelRays { angle: 0.0 });
    }
    Ok(Vector3::new(h[0] / h[3], h[1] / h[3], h[2] / h[3]))
}

fn projection_jacobian(p: &Vector3<f64>) -> Matrix2x3<f64> {
    let iz = 1.0 / p.z;
    Matrix2x3::new(iz, 0.0, -p.x * iz * iz, 0.0, iz, -p.y * iz * iz)
}

/// Triangulates a correspondence: linear DLT followed by one Gauss–Newton
/// step on the two-view reprojection error.
pub fn triangulate(pose: &CameraPose, pair: &Correspondence) -> Result<Vector3<f64>, GeometryError> {
    let x = triangulate_linear(pose, pair)?;
    let p2 = pose.transform(&x);
    if x.z <= DEPTH_EPS || p2.z <= DEPTH_EPS {
        return Ok(x);
    }
    let r1 = pair.x1 - x.xy() / x.z;
    let r2 = pair.x2 - p2.xy() / p2.z;
    let j1 = -projection_jacobian(&x);
    let j2 = -projection_jacobian(&p2) * pose.rotation;
    let jtj: Matrix3<f64> = j1.transpose() * j1 + j2.transpose() * j2;
    let jtr = j1.transpose() * r1 + j2.transpose() * r2;
    match jtj.cholesky() {
        Some(ch) => {
            let refined = x - ch.solve(&jtr);
            let cost = |p: &Vector3<f64>| {
                let q = pose.transform(p);
                if p.z <= DEPTH_EPS || q.z <= DEPTH_EPS {
                    return f64::INFINITY;
                }
                (pair.x1 - p.xy() / p.z).norm_squared() + (pair.x2 - q.xy() / q.z).norm_squared()
            };
            Ok(if cost(&refined) <= cost(&x) { refined } else { x })
        }
        None => Ok(x),
    }
}
