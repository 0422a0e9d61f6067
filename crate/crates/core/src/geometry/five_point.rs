//! Five-point essential matrix solver.
//!
//! The four-dimensional null space of the 5×9 epipolar constraint matrix
//! parameterizes `E = x·X + y·Y + z·Z + W`. The rank constraint and the
//! trace constraint `2·E·Eᵀ·E − tr(E·Eᵀ)·E = 0` give ten cubics in
//! `(x, y, z)`. Gauss–Jordan elimination over the first ten monomials
//! exposes three relations whose 3×3 polynomial matrix in `z` must be
//! singular; its determinant is the tenth-degree polynomial whose real roots
//! are the solutions.

use nalgebra::{DMatrix, Matrix3, SMatrix, Vector3};

use super::{CorrespondenceSet, EssentialMatrix, GeometryError};

/// Exponents `(x, y, z)` of the twenty monomials of degree ≤ 3, ordered so
/// that the first ten are eliminated.
const MONOMIALS: [(u8, u8, u8); 20] = [
    (3, 0, 0),
    (0, 3, 0),
    (2, 1, 0),
    (1, 2, 0),
    (2, 0, 1),
    (2, 0, 0),
    (0, 2, 1),
    (0, 2, 0),
    (1, 1, 1),
    (1, 1, 0),
    (1, 0, 2),
    (1, 0, 1),
    (1, 0, 0),
    (0, 1, 2),
    (0, 1, 1),
    (0, 1, 0),
    (0, 0, 3),
    (0, 0, 2),
    (0, 0, 1),
    (0, 0, 0),
];

const fn build_lookup() -> [u8; 64] {
    let mut table = [u8::MAX; 64];
    let mut i = 0;
    while i < 20 {
        let (a, b, c) = MONOMIALS[i];
        table[(a as usize) * 16 + (b as usize) * 4 + c as usize] = i as u8;
        i += 1;
    }
    table
}

const LOOKUP: [u8; 64] = build_lookup();

const M_X: usize = 12;
const M_Y: usize = 15;
const M_Z: usize = 18;
const M_ONE: usize = 19;

/// Dense polynomial of total degree ≤ 3 in `(x, y, z)`.
#[derive(Clone, Copy)]
struct Poly([f64; 20]);

impl Poly {
    fn zero() -> Self {
        Self([0.0; 20])
    }

    fn linear(x: f64, y: f64, z: f64, w: f64) -> Self {
        let mut p = Self::zero();
        p.0[M_X] = x;
        p.0[M_Y] = y;
        p.0[M_Z] = z;
        p.0[M_ONE] = w;
        p
    }

    fn mul(&self, other: &Poly) -> Poly {
        let mut out = Poly::zero();
        for (i, &a) in self.0.iter().enumerate() {
            if a == 0.0 {
                continue;
            }
            let (ax, ay, az) = MONOMIALS[i];
            for (j, &b) in other.0.iter().enumerate() {
                if b == 0.0 {
                    continue;
                }
                let (bx, by, bz) = MONOMIALS[j];
                let (x, y, z) = (ax + bx, ay + by, az + bz);
                debug_assert!(x + y + z <= 3, "product exceeds degree 3");
                let k = LOOKUP[(x as usize) * 16 + (y as usize) * 4 + z as usize] as usize;
                out.0[k] += a * b;
            }
        }
        out
    }

    fn add(&self, other: &Poly) -> Poly {
        let mut out = *self;
        for (o, b) in out.0.iter_mut().zip(other.0.iter()) {
            *o += b;
        }
        out
    }

    fn sub(&self, other: &Poly) -> Poly {
        let mut out = *self;
        for (o, b) in out.0.iter_mut().zip(other.0.iter()) {
            *o -= b;
        }
        out
    }

    fn scale(&self, s: f64) -> Poly {
        let mut out = *self;
        out.0.iter_mut().for_each(|v| *v *= s);
        out
    }
}

/// Univariate polynomial in `z`, coefficients from low to high degree.
fn upoly_mul(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.len() + b.len() - 1];
    for (i, &x) in a.iter().enumerate() {
        for (j, &y) in b.iter().enumerate() {
            out[i + j] += x * y;
        }
    }
    out
}

fn upoly_add(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.len().max(b.len())];
    for (i, v) in a.iter().enumerate() {
        out[i] += v;
    }
    for (i, v) in b.iter().enumerate() {
        out[i] += v;
    }
    out
}

fn upoly_sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    upoly_add(a, &b.iter().map(|v| -v).collect::<Vec<_>>())
}

fn upoly_eval(p: &[f64], z: f64) -> (f64, f64) {
    let mut v = 0.0;
    let mut d = 0.0;
    for &c in p.iter().rev() {
        d = d * z + v;
        v = v * z + c;
    }
    (v, d)
}

/// Real roots via eigenvalues of the companion matrix, Newton-polished.
fn real_roots(p: &[f64]) -> Vec<f64> {
    let scale = p.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        return Vec::new();
    }
    let mut deg = p.len() - 1;
    while deg > 0 && p[deg].abs() <= 1e-14 * scale {
        deg -= 1;
    }
    if deg == 0 {
        return Vec::new();
    }
    let lead = p[deg];
    let mut companion = DMatrix::<f64>::zeros(deg, deg);
    for i in 0..deg {
        companion[(0, i)] = -p[deg - 1 - i] / lead;
    }
    for i in 1..deg {
        companion[(i, i - 1)] = 1.0;
    }
    let eig = companion.complex_eigenvalues();
    let poly = &p[..=deg];
    let mut roots = Vec::new();
    for ev in eig.iter() {
        if ev.im.abs() > 1e-6 * (1.0 + ev.re.abs()) {
            continue;
        }
        let mut z = ev.re;
        let mut best = upoly_eval(poly, z).0.abs();
        for _ in 0..8 {
            let (v, d) = upoly_eval(poly, z);
            if d == 0.0 || v == 0.0 {
                break;
            }
            let cand = z - v / d;
            let cv = upoly_eval(poly, cand).0.abs();
            if !(cv < best) {
                break;
            }
            z = cand;
            best = cv;
        }
        roots.push(z);
    }
    roots
}

/// Solves for the essential matrices consistent with exactly five
/// correspondences. Returns between zero and ten candidates.
pub fn essential_from_five(minimal: &CorrespondenceSet) -> Result<Vec<EssentialMatrix>, GeometryError> {
    if minimal.len() != 5 {
        return Err(GeometryError::InsufficientCorrespondences {
            needed: 5,
            got: minimal.len(),
        });
    }
    if !minimal.is_finite() {
        return Err(GeometryError::DegenerateConfiguration("non-finite coordinates"));
    }

    let mut q = SMatrix::<f64, 9, 9>::zeros();
    for (r, c) in minimal.points.iter().enumerate() {
        let x1 = c.h1();
        let x2 = c.h2();
        for i in 0..3 {
            for j in 0..3 {
                q[(r, 3 * i + j)] = x2[i] * x1[j];
            }
        }
    }
    let svd = q.svd(false, true);
    let v_t = svd.v_t.ok_or(GeometryError::DegenerateConfiguration("SVD failed"))?;
    let mut order: Vec<usize> = (0..9).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let s0 = svd.singular_values[order[0]];
    let s4 = svd.singular_values[order[4]];
    if !(s0 > 0.0) || s4 <= 1e-10 * s0 {
        return Err(GeometryError::DegenerateConfiguration(
            "epipolar constraint matrix has rank < 5",
        ));
    }
    let basis: Vec<[f64; 9]> = order[5..]
        .iter()
        .map(|&k| {
            let mut b = [0.0; 9];
            for (i, v) in b.iter_mut().enumerate() {
                *v = v_t[(k, i)];
            }
            b
        })
        .collect();

    let e: Vec<Poly> = (0..9)
        .map(|k| Poly::linear(basis[0][k], basis[1][k], basis[2][k], basis[3][k]))
        .collect();
    let at = |i: usize, j: usize| &e[3 * i + j];

    let mut rows: Vec<Poly> = Vec::with_capacity(10);
    let det = at(0, 0)
        .mul(&at(1, 1).mul(at(2, 2)).sub(&at(1, 2).mul(at(2, 1))))
        .sub(&at(0, 1).mul(&at(1, 0).mul(at(2, 2)).sub(&at(1, 2).mul(at(2, 0)))))
        .add(&at(0, 2).mul(&at(1, 0).mul(at(2, 1)).sub(&at(1, 1).mul(at(2, 0)))));
    rows.push(det);

    let mut eet = vec![Poly::zero(); 9];
    for i in 0..3 {
        for j in 0..3 {
            let mut acc = Poly::zero();
            for k in 0..3 {
                acc = acc.add(&at(i, k).mul(at(j, k)));
            }
            eet[3 * i + j] = acc;
        }
    }
    let trace = eet[0].add(&eet[4]).add(&eet[8]);
    for i in 0..3 {
        for j in 0..3 {
            let mut acc = Poly::zero();
            for k in 0..3 {
                acc = acc.add(&eet[3 * i + k].mul(at(k, j)));
            }
            rows.push(acc.scale(2.0).sub(&trace.mul(at(i, j))));
        }
    }

    let mut a = SMatrix::<f64, 10, 20>::zeros();
    for (r, p) in rows.iter().enumerate() {
        for c in 0..20 {
            a[(r, c)] = p.0[c];
        }
    }
    if !gauss_jordan(&mut a) {
        return Ok(Vec::new());
    }

    // Rows (4,5), (6,7), (8,9) lead with x²z/x², y²z/y², xyz/xy; row_a − z·row_b
    // cancels the leading monomial and leaves a polynomial in x, y, 1 with
    // z-dependent coefficients.
    let mut bmat: [[Vec<f64>; 3]; 3] = Default::default();
    for (r, (ra, rb)) in [(4usize, 5usize), (6, 7), (8, 9)].into_iter().enumerate() {
        for col in bmat[r].iter_mut() {
            *col = vec![0.0; 5];
        }
        for c in 10..20 {
            let (mx, my, mz) = MONOMIALS[c];
            let col = if mx == 1 {
                0
            } else if my == 1 {
                1
            } else {
                2
            };
            let k = mz as usize;
            bmat[r][col][k] += a[(ra, c)];
            bmat[r][col][k + 1] -= a[(rb, c)];
        }
    }

    let m = |i: usize, j: usize| bmat[i][j].as_slice();
    let det_poly = upoly_add(
        &upoly_sub(
            &upoly_mul(
                m(0, 0),
                &upoly_sub(&upoly_mul(m(1, 1), m(2, 2)), &upoly_mul(m(1, 2), m(2, 1))),
            ),
            &upoly_mul(
                m(0, 1),
                &upoly_sub(&upoly_mul(m(1, 0), m(2, 2)), &upoly_mul(m(1, 2), m(2, 0))),
            ),
        ),
        &upoly_mul(
            m(0, 2),
            &upoly_sub(&upoly_mul(m(1, 0), m(2, 1)), &upoly_mul(m(1, 1), m(2, 0))),
        ),
    );

    let mut out = Vec::new();
    for z in real_roots(&det_poly) {
        let mut b = Matrix3::<f64>::zeros();
        for i in 0..3 {
            for j in 0..3 {
                b[(i, j)] = upoly_eval(&bmat[i][j], z).0;
            }
        }
        let r0: Vector3<f64> = b.row(0).transpose();
        let r1: Vector3<f64> = b.row(1).transpose();
        let r2: Vector3<f64> = b.row(2).transpose();
        let v = [r0.cross(&r1), r0.cross(&r2), r1.cross(&r2)]
            .into_iter()
            .max_by(|p, q| p.norm_squared().total_cmp(&q.norm_squared()))
            .unwrap();
        if v.z.abs() <= 1e-14 * v.norm() || v.norm() == 0.0 {
            continue;
        }
        let (x, y) = (v.x / v.z, v.y / v.z);
        let mut em = Matrix3::zeros();
        for i in 0..3 {
            for j in 0..3 {
                let k = 3 * i + j;
                em[(i, j)] = x * basis[0][k] + y * basis[1][k] + z * basis[2][k] + basis[3][k];
            }
        }
        if let Some(ess) = EssentialMatrix::from_matrix(&em) {
            out.push(ess);
        }
    }
    Ok(out)
}

/// Reduces the leading 10×10 block to the identity. Returns false when a
/// pivot vanishes.
fn gauss_jordan(a: &mut SMatrix<f64, 10, 20>) -> bool {
    let scale = a.amax();
    if scale == 0.0 {
        return false;
    }
    for col in 0..10 {
        let (pivot_row, pivot) = (col..10)
            .map(|r| (r, a[(r, col)].abs()))
            .max_by(|x, y| x.1.total_cmp(&y.1))
            .unwrap();
        if pivot <= 1e-14 * scale {
            return false;
        }
        a.swap_rows(col, pivot_row);
        let p = a[(col, col)];
        for c in 0..20 {
            a[(col, c)] /= p;
        }
        for r in 0..10 {
            if r != col {
                let f = a[(r, col)];
                if f != 0.0 {
                    for c in 0..20 {
                        a[(r, c)] -= f * a[(col, c)];
                    }
                }
            }
        }
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{decompose_essential, project, CameraPose, Correspondence};
    use nalgebra::Rotation3;
    use rand::{Rng, SeedableRng};

    fn scene(rng: &mut impl Rng, pose: &CameraPose, n: usize) -> CorrespondenceSet {
        let mut pts = Vec::new();
        while pts.len() < n {
            let x = Vector3::new(
                rng.random_range(-1.5..1.5),
                rng.random_range(-1.5..1.5),
                rng.random_range(3.0..8.0),
            );
            let p2 = pose.transform(&x);
            if p2.z < 0.5 {
                continue;
            }
            pts.push(Correspondence {
                x1: project(&CameraPose::identity(), &x).unwrap(),
                x2: project(pose, &x).unwrap(),
            });
        }
        CorrespondenceSet::new(pts)
    }

    fn random_pose(rng: &mut impl Rng) -> CameraPose {
        let axis = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        )
        .normalize();
        let r = Rotation3::new(axis * rng.random_range(0.0..0.4));
        let t = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        CameraPose::new(*r.matrix(), t).unwrap()
    }

    #[test]
    fn pure_translation_recovers_cross_product_matrix() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let pose = CameraPose::new(Matrix3::identity(), Vector3::x()).unwrap();
        let corr = scene(&mut rng, &pose, 5);
        let sols = essential_from_five(&corr).unwrap();
        let target = Matrix3::new(0.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0, 1.0, 0.0) / 2f64.sqrt();
        let found = sols
            .iter()
            .any(|e| (e.matrix() - target).norm() < 1e-8 || (e.matrix() + target).norm() < 1e-8);
        assert!(found, "{sols:?}");
    }

    #[test]
    fn every_solution_satisfies_the_five_constraints() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(6);
        for _ in 0..100 {
            let pose = random_pose(&mut rng);
            let corr = scene(&mut rng, &pose, 5);
            let sols = essential_from_five(&corr).unwrap();
            assert!(!sols.is_empty() && sols.len() <= 10);
            for e in &sols {
                for c in &corr.points {
                    let r = c.h2().dot(&(e.matrix() * c.h1()));
                    assert!(r.abs() < 1e-8, "residual {r}");
                }
                let mut s: Vec<f64> = e.matrix().singular_values().iter().copied().collect();
                s.sort_by(|a, b| b.total_cmp(a));
                assert!((s[0] - s[1]).abs() < 1e-6 && s[2] < 1e-6);
                assert!(e.matrix().determinant().abs() < 1e-9);
            }
        }
    }

    #[test]
    fn recovers_generating_pose_on_random_minimal_problems() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        for trial in 0..100 {
            let pose = random_pose(&mut rng);
            let corr = scene(&mut rng, &pose, 5);
            let sols = essential_from_five(&corr).unwrap();
            let best = sols
                .iter()
                .filter_map(|e| decompose_essential(e, &corr).ok())
                .map(|p| {
                    let r = crate::geometry::rotation_angle(&p.rotation, &pose.rotation);
                    let t = crate::geometry::direction_angle(&p.translation, &pose.translation);
                    r.max(t).to_degrees()
                })
                .fold(f64::INFINITY, f64::min);
            assert!(best < 1e-6, "trial {trial}: best error {best}°");
        }
    }

    #[test]
    fn repeated_points_are_degenerate() {
        let c = Correspondence::new(0.1, 0.2, 0.15, 0.22);
        let corr = CorrespondenceSet::new(vec![c; 5]);
        assert!(matches!(
            essential_from_five(&corr),
            Err(GeometryError::DegenerateConfiguration(_))
        ));
    }

    #[test]
    fn companion_roots() {
        // (z - 1)(z + 2)(z - 3) = z³ - 2z² - 5z + 6
        let mut r = real_roots(&[6.0, -5.0, -2.0, 1.0]);
        r.sort_by(f64::total_cmp);
        assert!((r[0] + 2.0).abs() < 1e-12 && (r[1] - 1.0).abs() < 1e-12 && (r[2] - 3.0).abs() < 1e-12);
        // z² + 1 has no real roots
        assert!(real_roots(&[1.0, 0.0, 1.0]).is_empty());
    }
}
